//! Particle ensembles, the sample mean/covariance estimators, and the
//! Monte Carlo consistency sweep against the closed-form posterior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow::FlowParameterization;
use crate::linalg::matrix_to_rows;
use crate::model::{GaussianPrior, LinearMeasurement};
use crate::moments::closed_form_posterior;
use crate::rng::{derive_seed, purpose, NoiseStream};
use crate::sde::{flow_noise_seed, propagate_ensemble_with, FlowSchedule, LambdaGrid};

/// `N` particles at a common λ. Each particle carries a stable id that
/// selects its noise stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<DVector<f64>>,
    ids: Vec<u64>,
    lambda: f64,
    seed: u64,
    dim: usize,
}

impl ParticleEnsemble {
    pub fn from_parts(particles: Vec<DVector<f64>>, ids: Vec<u64>, lambda: f64, seed: u64) -> Result<Self> {
        if particles.is_empty() {
            return Err(FlowError::InsufficientSamples { needed: 1, got: 0 });
        }
        if ids.len() != particles.len() {
            return Err(FlowError::Dimension { what: "particle ids", expected: particles.len(), found: ids.len() });
        }
        let dim = particles[0].len();
        for p in &particles {
            if p.len() != dim {
                return Err(FlowError::Dimension { what: "particle", expected: dim, found: p.len() });
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(FlowError::NonFinite("particle"));
            }
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(FlowError::LambdaRange(lambda));
        }
        Ok(Self { particles, ids, lambda, seed, dim })
    }

    /// Ensemble at `λ = 0` with ids `0..N`.
    pub fn at_start(particles: Vec<DVector<f64>>, seed: u64) -> Result<Self> {
        let ids = (0..particles.len() as u64).collect();
        Self::from_parts(particles, ids, 0.0, seed)
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// CSV dump `particle_id,x_0,..,x_{n-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("particle_id");
        for i in 0..self.dim {
            out.push_str(&format!(",x_{i}"));
        }
        out.push('\n');
        for (id, p) in self.ids.iter().zip(&self.particles) {
            out.push_str(&id.to_string());
            for v in p.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// i.i.d. draws `x_prior + L ξ` with `L Lᵀ = P_g`. Particle `i` reads stream
/// `i` of the prior-sampling key derived from `seed`.
pub fn sample_prior(count: usize, prior: &GaussianPrior, seed: u64) -> Result<ParticleEnsemble> {
    if count == 0 {
        return Err(FlowError::InsufficientSamples { needed: 1, got: 0 });
    }
    let l = prior.cov_factor();
    let key = derive_seed(seed, purpose::PRIOR, 0);
    let mut xi = DVector::zeros(prior.dim());
    let particles = (0..count as u64)
        .map(|id| {
            NoiseStream::new(key, id).normals_at(0, xi.as_mut_slice());
            prior.mean() + &l * &xi
        })
        .collect();
    ParticleEnsemble::at_start(particles, seed)
}

/// Arithmetic mean over particles, summed in id order.
pub fn mean_estimate(ensemble: &ParticleEnsemble) -> DVector<f64> {
    let mut sum = DVector::zeros(ensemble.dim());
    for p in ensemble.particles() {
        sum += p;
    }
    sum / ensemble.len() as f64
}

/// Unbiased (`1/(N−1)`) sample covariance, two-pass.
pub fn covariance_estimate(ensemble: &ParticleEnsemble) -> Result<DMatrix<f64>> {
    let count = ensemble.len();
    if count < 2 {
        return Err(FlowError::InsufficientSamples { needed: 2, got: count });
    }
    let mean = mean_estimate(ensemble);
    let n = ensemble.dim();
    let mut acc = DMatrix::zeros(n, n);
    let mut centered = DVector::zeros(n);
    for p in ensemble.particles() {
        centered.copy_from(p);
        centered -= &mean;
        acc.ger(1.0, &centered, &centered, 1.0);
    }
    acc /= (count - 1) as f64;
    Ok(crate::linalg::symmetrize(&acc))
}

/// Ensemble estimates next to the closed-form posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub mean_estimate: Vec<f64>,
    pub cov_estimate: Vec<Vec<f64>>,
    pub oracle_mean: Vec<f64>,
    pub oracle_cov: Vec<Vec<f64>>,
    pub mean_error_norm: f64,
    pub cov_error_norm: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

impl EstimatorReport {
    pub fn new(ensemble: &ParticleEnsemble, prior: &GaussianPrior, meas: &LinearMeasurement) -> Result<Self> {
        let mean = mean_estimate(ensemble);
        let cov = covariance_estimate(ensemble)?;
        let (oracle_mean, oracle_cov) = closed_form_posterior(1.0, prior, meas)?;
        Ok(Self {
            mean_error_norm: (&mean - &oracle_mean).norm(),
            cov_error_norm: (&cov - &oracle_cov).norm(),
            mean_estimate: mean.iter().copied().collect(),
            cov_estimate: matrix_to_rows(&cov),
            oracle_mean: oracle_mean.iter().copied().collect(),
            oracle_cov: matrix_to_rows(&oracle_cov),
            n: ensemble.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub seed_count: usize,
    /// Mean over seeds of `‖x̂_N − x_μ(1)‖`.
    pub mean_err: f64,
    /// Mean over seeds of `‖P̂_N − P_p(1)‖_F`.
    pub cov_err: f64,
    /// Largest per-seed mean error.
    pub max_mean_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyTable {
    pub rows: Vec<ConsistencyRow>,
    /// Least-squares slope of `ln mean_err` against `ln N`.
    pub slope: Option<f64>,
}

impl ConsistencyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,seed_count,mean_err,cov_err\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.n, r.seed_count, r.mean_err, r.cov_err));
        }
        out
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn consistency_sweep(
    params: &FlowParameterization,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
    n_list: &[usize],
    seeds: &[u64],
    grid: &LambdaGrid,
) -> Result<ConsistencyTable> {
    if n_list.is_empty() || seeds.is_empty() {
        return Err(FlowError::Parameter("consistency sweep needs at least one N and one seed".into()));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FlowError::Parameter("N list must be strictly ascending".into()));
    }
    if let Some(&small) = n_list.iter().find(|&&n| n < 2) {
        return Err(FlowError::InsufficientSamples { needed: 2, got: small });
    }
    let schedule = FlowSchedule::new(params, grid, prior, meas)?;
    let (oracle_mean, oracle_cov) = closed_form_posterior(1.0, prior, meas)?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &count in n_list {
        let (mut mean_sum, mut cov_sum, mut max_mean) = (0.0, 0.0, 0.0_f64);
        for &seed in seeds {
            let start = sample_prior(count, prior, seed)?;
            let end = propagate_ensemble_with(&schedule, &start, flow_noise_seed(seed))?;
            let mean_err = (mean_estimate(&end) - &oracle_mean).norm();
            mean_sum += mean_err;
            max_mean = max_mean.max(mean_err);
            cov_sum += (covariance_estimate(&end)? - &oracle_cov).norm();
        }
        let k = seeds.len() as f64;
        rows.push(ConsistencyRow {
            n: count,
            seed_count: seeds.len(),
            mean_err: mean_sum / k,
            cov_err: cov_sum / k,
            max_mean_err: max_mean,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_err.ln()).collect();
    Ok(ConsistencyTable { slope: fit_slope(&xs, &ys), rows })
}
