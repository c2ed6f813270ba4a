//! Experiment runner behind the `flowfilt` binary.
//!
//! A run loads a JSON config, computes every artifact in memory, and only
//! then writes the output directory, so a failing run leaves nothing behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use flowfilt_core::ensemble::{consistency_sweep, sample_prior, EstimatorReport};
use flowfilt_core::moments::{closed_form_posterior, solve_moment_odes};
use flowfilt_core::sde::{flow_noise_seed, propagate_ensemble_with, FlowSchedule, DEFAULT_STEPS};
use flowfilt_core::sequential::{run_sequential, SequentialScenario};
use flowfilt_core::stability::{stability_report, StabilityConfig};
use flowfilt_core::verify::{timed, CriterionOutcome};
use flowfilt_core::{FlowDescriptor, FlowError, LambdaGrid, LinearGaussianModel, NoiseStream, Scheme, VERSION};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FlowPath,
    Moments,
    EnsembleConsistency,
    Stability,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_scheme() -> Scheme {
    Scheme::EulerMaruyama
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps: default_steps(), scheme: default_scheme() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
}

/// Sweep settings; replicate `i` uses ensemble seed `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyConfig {
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub seed_count: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { n_list: vec![100, 1_000, 10_000], seed_count: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model file, relative to the config file's directory.
    pub model: PathBuf,
    pub flow: FlowDescriptor,
    #[serde(default)]
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub experiment: ExperimentKind,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequential: Option<SequentialScenario>,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

pub const MIN_STEPS: usize = 10;

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.ensemble.seed = seed;
        }
        if let Some(steps) = overrides.steps {
            self.grid.steps = steps;
        }
        if let Some(out) = &overrides.out {
            self.output_dir = out.clone();
        }
    }

    fn validate(&self) -> Result<(), RunError> {
        if self.ensemble.n < 1 {
            return Err(RunError::Config("ensemble.N must be at least 1".into()));
        }
        if self.grid.steps < MIN_STEPS {
            return Err(RunError::Config(format!("grid.steps must be at least {MIN_STEPS}, got {}", self.grid.steps)));
        }
        if self.experiment == ExperimentKind::Sequential && self.sequential.is_none() {
            return Err(RunError::Config("experiment \"sequential\" needs a \"sequential\" section".into()));
        }
        if let Some(c) = &self.consistency {
            if c.seed_count == 0 || c.n_list.is_empty() {
                return Err(RunError::Config("consistency needs a non-empty N_list and seed_count >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("model file {path}: {source}")]
    Model { path: PathBuf, source: FlowError },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub mod exit {
    pub const VERIFY_FAILED: i32 = 1;
    pub const CONFIG: i32 = 3;
    pub const MODEL_PARSE: i32 = 4;
    pub const INADMISSIBLE: i32 = 5;
    pub const DIVERGENCE: i32 = 6;
    pub const GRID_SENSITIVE: i32 = 7;
    pub const NUMERICAL: i32 = 8;
    pub const IO: i32 = 9;
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => exit::CONFIG,
            RunError::Model { .. } => exit::MODEL_PARSE,
            RunError::Io { .. } => exit::IO,
            RunError::Flow(e) => match e.root() {
                FlowError::Inadmissible { .. } => exit::INADMISSIBLE,
                FlowError::Divergence { .. } => exit::DIVERGENCE,
                FlowError::GridSensitive(_) => exit::GRID_SENSITIVE,
                FlowError::Parse(_) => exit::MODEL_PARSE,
                _ => exit::NUMERICAL,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            exit::CONFIG => "config",
            exit::MODEL_PARSE => "model_parse",
            exit::INADMISSIBLE => "inadmissible",
            exit::DIVERGENCE => "divergence",
            exit::GRID_SENSITIVE => "grid_sensitive",
            exit::IO => "io",
            _ => "numerical",
        }
    }

    /// Machine-readable record printed on stderr.
    pub fn record(&self) -> Value {
        let mut rec = json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() });
        if let RunError::Flow(FlowError::AtStep { step, .. }) = self {
            rec["step"] = json!(step);
        }
        rec
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Files produced by a run, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
    pub summary: Value,
    pub seeds: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub summary: Value,
}

/// Loads the config and runs it, writing into the output directory.
pub fn run_config_file(path: &Path, overrides: &Overrides) -> Result<RunOutcome, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut config = ExperimentConfig::from_json_str(&text)?;
    // `--out` is relative to the working directory, not to the config.
    let mut overrides = overrides.clone();
    if let Some(out) = overrides.out.take() {
        let cwd = std::env::current_dir().map_err(io_err(Path::new(".")))?;
        overrides.out = Some(cwd.join(out));
    }
    config.apply(&overrides);
    let base = path.parent().unwrap_or(Path::new("."));
    run(&config, base)
}

/// Runs a parsed config. Relative paths resolve against `base`.
pub fn run(config: &ExperimentConfig, base: &Path) -> Result<RunOutcome, RunError> {
    let start = Instant::now();
    config.validate()?;
    let model_path = base.join(&config.model);
    if !model_path.is_file() {
        return Err(RunError::Config(format!("model file {} does not exist", model_path.display())));
    }
    let model = LinearGaussianModel::load(&model_path)
        .map_err(|source| RunError::Model { path: model_path.clone(), source })?;
    let artifacts = compute(config, &model)?;

    let out_dir = base.join(&config.output_dir);
    let mut names: Vec<String> = artifacts.files.iter().map(|(n, _)| n.clone()).collect();
    names.push("summary.json".into());
    names.push("run_manifest.json".into());
    let manifest = json!({
        "tool": "flowfilt",
        "version": VERSION,
        "experiment": config.experiment,
        "config": config,
        "model_file": model_path.display().to_string(),
        "seeds": artifacts.seeds,
        "files": names,
        "wall_time_s": start.elapsed().as_secs_f64(),
    });

    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    for (name, body) in &artifacts.files {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    for (name, value) in [("summary.json", &artifacts.summary), ("run_manifest.json", &manifest)] {
        let p = out_dir.join(name);
        let body = serde_json::to_string_pretty(value).expect("json values serialize") + "\n";
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(RunOutcome { output_dir: out_dir, files: names, summary: artifacts.summary })
}

/// Particles whose full λ-path is written by `flow_path`.
pub const TRACKED_PARTICLES: usize = 16;

/// Everything a run produces, without touching the filesystem.
pub fn compute(config: &ExperimentConfig, model: &LinearGaussianModel) -> Result<Artifacts, RunError> {
    let (prior, meas) = (&model.prior, &model.meas);
    let grid = LambdaGrid::uniform(config.grid.steps, config.grid.scheme)?;
    let seed = config.ensemble.seed;
    let mut seeds = BTreeMap::from([("ensemble_seed", seed)]);
    let mut files = Vec::new();
    let summary = match config.experiment {
        ExperimentKind::FlowPath => {
            let params = config.flow.build(prior, meas)?;
            let schedule = FlowSchedule::new(&params, &grid, prior, meas)?;
            let start = sample_prior(config.ensemble.n, prior, seed)?;
            let end = propagate_ensemble_with(&schedule, &start, flow_noise_seed(seed))?;
            // Replays the first few particles on their own streams to record paths.
            let mut paths = String::from("lambda,particle_id");
            for i in 0..prior.dim() {
                paths.push_str(&format!(",x_{i}"));
            }
            paths.push('\n');
            for (x0, &id) in start.particles().iter().zip(start.ids()).take(TRACKED_PARTICLES) {
                let mut record = Vec::with_capacity(grid.steps() + 1);
                schedule.integrate(x0, &mut NoiseStream::new(flow_noise_seed(seed), id), Some(&mut record))?;
                for (lambda, x) in record {
                    paths.push_str(&format!("{lambda},{id}"));
                    for v in x.iter() {
                        paths.push_str(&format!(",{v}"));
                    }
                    paths.push('\n');
                }
            }
            files.push(("particles.csv".to_string(), end.to_csv()));
            files.push(("trajectories.csv".to_string(), paths));
            let report = EstimatorReport::new(&end, prior, meas)?;
            json!({ "experiment": "flow_path", "flow": config.flow.name(), "estimate": report })
        }
        ExperimentKind::Moments => {
            let params = config.flow.build(prior, meas)?;
            let path = solve_moment_odes(&params, &grid, prior, meas)?;
            let (oracle_mean, oracle_cov) = closed_form_posterior(1.0, prior, meas)?;
            let (mean, cov) = path.terminal();
            files.push(("moments.csv".to_string(), path.to_csv()));
            json!({
                "experiment": "moments",
                "flow": config.flow.name(),
                "mean": mean.as_slice(),
                "cov": rows(cov),
                "oracle_mean": oracle_mean.as_slice(),
                "oracle_cov": rows(&oracle_cov),
                "mean_error_norm": (mean - &oracle_mean).norm(),
                "cov_error_norm": (cov - &oracle_cov).norm(),
            })
        }
        ExperimentKind::EnsembleConsistency => {
            let params = config.flow.build(prior, meas)?;
            let c = config.consistency.clone().unwrap_or_default();
            let seed_list: Vec<u64> = (0..c.seed_count as u64).map(|i| seed.wrapping_add(i)).collect();
            let table = consistency_sweep(&params, prior, meas, &c.n_list, &seed_list, &grid)?;
            files.push(("consistency.csv".to_string(), table.to_csv()));
            json!({ "experiment": "ensemble_consistency", "flow": config.flow.name(), "table": table })
        }
        ExperimentKind::Stability => {
            let params = config.flow.build(prior, meas)?;
            let c = config.stability.clone().unwrap_or_default();
            let analysis = stability_report(&params, prior, meas, &grid, &c, seed)?;
            files.push(("lyapunov.csv".to_string(), analysis.trajectory.to_csv()));
            json!({ "experiment": "stability", "flow": config.flow.name(), "report": analysis.report })
        }
        ExperimentKind::Sequential => {
            let scenario = config.sequential.as_ref().expect("validated");
            seeds.insert("truth_seed", scenario.truth_seed);
            let table = run_sequential(scenario, model, &config.flow, &grid, config.ensemble.n, seed)?;
            files.push(("sequential.csv".to_string(), table.to_csv()));
            json!({
                "experiment": "sequential",
                "flow": config.flow.name(),
                "rmse_ratio": table.rmse_ratio(),
                "final_flow_mean": table.final_flow_mean,
                "final_kalman_mean": table.final_kalman_mean,
                "final_truth": table.final_truth,
                "rows": table.rows,
            })
        }
    };
    Ok(Artifacts { files, summary, seeds })
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    flowfilt_core::linalg::matrix_to_rows(m)
}

/// Runs `config` inside a rayon pool with the given number of threads.
pub fn compute_with_threads(
    config: &ExperimentConfig,
    model: &LinearGaussianModel,
    threads: usize,
) -> Result<Artifacts, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
    pool.install(|| compute(config, model))
}

/// Configs used by the determinism check: one per stochastic pipeline.
pub fn determinism_configs() -> Vec<(ExperimentConfig, LinearGaussianModel)> {
    let canonical = flowfilt_core::instances::canonical_model();
    let cv = flowfilt_core::sequential::constant_velocity_model(1.0, 1.0).expect("static model");
    let base = |experiment, flow| ExperimentConfig {
        model: "model.json".into(),
        flow,
        grid: GridConfig { steps: 200, scheme: Scheme::EulerMaruyama },
        ensemble: EnsembleConfig { n: 2000, seed: 42 },
        experiment,
        output_dir: "out".into(),
        consistency: None,
        stability: None,
        sequential: None,
    };
    vec![
        (base(ExperimentKind::FlowPath, FlowDescriptor::FixedQ), canonical.clone()),
        (base(ExperimentKind::FlowPath, FlowDescriptor::Diagnostic { alpha: 0.5 }), canonical.clone()),
        (
            ExperimentConfig {
                consistency: Some(ConsistencyConfig { n_list: vec![50, 500], seed_count: 4 }),
                ..base(ExperimentKind::EnsembleConsistency, FlowDescriptor::FixedQ)
            },
            canonical,
        ),
        (
            ExperimentConfig {
                sequential: Some(SequentialScenario::constant_velocity(0.1, 5, 7)),
                ..base(ExperimentKind::Sequential, FlowDescriptor::FixedQ)
            },
            cv,
        ),
    ]
}

/// Same config, 1 vs 4 threads, twice each: all CSV payloads must match byte
/// for byte.
pub fn determinism_check() -> CriterionOutcome {
    timed(9, "run determinism across threads", Duration::from_secs(60), || {
        let mut compared = 0usize;
        for (config, model) in determinism_configs() {
            let reference = compute_with_threads(&config, &model, 1).map_err(flow_or_param)?;
            for threads in [1, 4] {
                let again = compute_with_threads(&config, &model, threads).map_err(flow_or_param)?;
                if again.files != reference.files {
                    return Ok((false, format!("{:?} differs with {threads} threads", config.experiment)));
                }
                compared += again.files.len();
            }
        }
        Ok((true, format!("{compared} CSV payloads identical across reruns and 1/4 threads")))
    })
}

fn flow_or_param(e: RunError) -> FlowError {
    match e {
        RunError::Flow(f) => f,
        other => FlowError::Parameter(other.to_string()),
    }
}

/// All acceptance checks in order.
pub fn verify_all() -> Vec<CriterionOutcome> {
    let mut out = flowfilt_core::verify::run_library_checks();
    out.push(determinism_check());
    out.sort_by_key(|c| c.id);
    out
}

/// `(name, summary)` rows for `flowfilt presets`.
pub fn presets_table() -> String {
    let mut out = String::new();
    for (name, summary) in flowfilt_core::preset_catalog() {
        out.push_str(&format!("{name:<12} {summary}\n"));
    }
    out
}
