//! Finite-time stability of the error system `dx̃ = A(λ) x̃ dλ`.
//!
//! The difference of two flow solutions sees no noise (the diffusion does
//! not depend on the state), so the error obeys a deterministic linear ODE.
//! Along it `V = x̃ᵀ M(λ) x̃` satisfies `dV/dλ = −(M x̃)ᵀ Q (M x̃)`.
//!
//! All checks use the constant weight `S = P_g⁻¹` unless the caller passes
//! another one.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow::{FlowParameterization, PSD_REL_TOL};
use crate::linalg::{matrix_to_rows, min_sym_eigenvalue, sym_eigenvalues};
use crate::model::{homotopy_derivatives, GaussianPrior, HomotopyDerivatives, LinearMeasurement};
use crate::rng::{derive_seed, purpose, NoiseStream};
use crate::sde::{zero_diffusion_tol, FlowSchedule, LambdaGrid, Scheme, DIVERGENCE_NORM};

/// Error-system coefficients sampled on a grid: `A` at nodes and midpoints
/// (for RK4) and the Lyapunov weight `M` at nodes.
#[derive(Debug, Clone)]
pub struct ErrorSystem {
    nodes: Vec<f64>,
    a_nodes: Vec<DMatrix<f64>>,
    a_mids: Vec<DMatrix<f64>>,
    m_nodes: Vec<DMatrix<f64>>,
}

impl ErrorSystem {
    pub fn for_flow(
        params: &FlowParameterization,
        grid: &LambdaGrid,
        prior: &GaussianPrior,
        meas: &LinearMeasurement,
    ) -> Result<Self> {
        let schedule = FlowSchedule::new(params, &grid.with_scheme(Scheme::EulerMaruyama), prior, meas)?;
        Self::from_schedule(&schedule, prior, meas)
    }

    pub fn from_schedule(schedule: &FlowSchedule, prior: &GaussianPrior, meas: &LinearMeasurement) -> Result<Self> {
        let nodes = schedule.grid().nodes().to_vec();
        let m_nodes = nodes
            .iter()
            .map(|&l| homotopy_derivatives(prior.mean(), l, prior, meas).map(|d| d.m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            nodes,
            a_nodes: schedule.at_nodes().iter().map(|c| c.a.clone()).collect(),
            a_mids: schedule.at_midpoints().iter().map(|c| c.a.clone()).collect(),
            m_nodes,
        })
    }

    /// Generic linear system `dx̃ = A(λ) x̃` with weight `M(λ)`; used to
    /// exercise the checkers on dynamics that are not flows.
    pub fn from_fns(grid: &LambdaGrid, a: impl Fn(f64) -> DMatrix<f64>, m: impl Fn(f64) -> DMatrix<f64>) -> Self {
        let nodes = grid.nodes().to_vec();
        Self {
            a_nodes: nodes.iter().map(|&l| a(l)).collect(),
            a_mids: grid.midpoints().map(&a).collect(),
            m_nodes: nodes.iter().map(|&l| m(l)).collect(),
            nodes,
        }
    }

    pub fn dim(&self) -> usize {
        self.a_nodes[0].nrows()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn rk4_step(&self, k: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let h = self.nodes[k + 1] - self.nodes[k];
        let (a0, am, a1) = (&self.a_nodes[k], &self.a_mids[k], &self.a_nodes[k + 1]);
        let k1 = a0 * x;
        let k2 = am * (x + &k1 * (0.5 * h));
        let k3 = am * (x + &k2 * (0.5 * h));
        let k4 = a1 * (x + &k3 * h);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Solves the error ODE from `x̃₀` with RK4.
    pub fn trajectory(&self, x0: &DVector<f64>, s: &DMatrix<f64>) -> Result<ErrorTrajectory> {
        if x0.len() != self.dim() {
            return Err(FlowError::Dimension { what: "initial error", expected: self.dim(), found: x0.len() });
        }
        let mut x = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());
        let mut errors = Vec::with_capacity(self.nodes.len());
        errors.push(x0.clone());
        for k in 0..self.nodes.len() - 1 {
            x = self.rk4_step(k, &x);
            if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
                return Err(FlowError::Divergence { step: k + 1, lambda: self.nodes[k + 1], particle: None });
            }
            errors.push(x.column(0).into_owned());
        }
        let v_m = errors.iter().zip(&self.m_nodes).map(|(e, m)| quad(e, m)).collect();
        let v_s = errors.iter().map(|e| quad(e, s)).collect();
        Ok(ErrorTrajectory { nodes: self.nodes.clone(), errors, v_m, v_s })
    }

    /// State-transition matrices `Φ(λ_k)` with `x̃(λ_k) = Φ(λ_k) x̃₀`.
    pub fn transition_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        let n = self.dim();
        let mut phi = DMatrix::identity(n, n);
        let mut out = Vec::with_capacity(self.nodes.len());
        out.push(phi.clone());
        for k in 0..self.nodes.len() - 1 {
            phi = self.rk4_step(k, &phi);
            if !phi.iter().all(|v| v.is_finite()) {
                return Err(FlowError::Divergence { step: k + 1, lambda: self.nodes[k + 1], particle: None });
            }
            out.push(phi.clone());
        }
        Ok(out)
    }
}

fn quad(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    x.dot(&(w * x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTrajectory {
    pub nodes: Vec<f64>,
    pub errors: Vec<DVector<f64>>,
    /// `x̃ᵀ M(λ) x̃`
    pub v_m: Vec<f64>,
    /// `x̃ᵀ S x̃`
    pub v_s: Vec<f64>,
}

impl ErrorTrajectory {
    /// `x̃ᵀ S x̃` along the path for an arbitrary constant `S`.
    pub fn weighted(&self, s: &DMatrix<f64>) -> Vec<f64> {
        self.errors.iter().map(|e| quad(e, s)).collect()
    }

    /// CSV `lambda,V_M,V_S`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,V_M,V_S\n");
        for ((l, vm), vs) in self.nodes.iter().zip(&self.v_m).zip(&self.v_s) {
            out.push_str(&format!("{l},{vm},{vs}\n"));
        }
        out
    }
}

pub fn error_trajectory(
    x1_0: &DVector<f64>,
    x2_0: &DVector<f64>,
    params: &FlowParameterization,
    grid: &LambdaGrid,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<ErrorTrajectory> {
    if x1_0.len() != x2_0.len() {
        return Err(FlowError::Dimension { what: "x2_0", expected: x1_0.len(), found: x2_0.len() });
    }
    ErrorSystem::for_flow(params, grid, prior, meas)?.trajectory(&(x1_0 - x2_0), prior.precision())
}

/// `dV/dλ = −(M x̃)ᵀ Q (M x̃)`.
pub fn lyapunov_derivative(xtilde: &DVector<f64>, _lambda: f64, q: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> f64 {
    let mx = &derivs.m * xtilde;
    -mx.dot(&(q * &mx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtsVerdict {
    pub holds: bool,
    /// Whether `x̃₀ᵀ S x̃₀ < α`; when false the verdict is vacuous.
    pub premise_met: bool,
    pub alpha: f64,
    pub beta: f64,
    pub max_weighted_error: f64,
}

/// Finite-time stability w.r.t. `(α, β, S)` on the sampled path:
/// `x̃₀ᵀSx̃₀ < α ⇒ x̃ᵀSx̃ < β` at every node.
pub fn check_fts(trajectory: &ErrorTrajectory, alpha: f64, beta: f64, s: &DMatrix<f64>) -> Result<FtsVerdict> {
    if !(alpha > 0.0 && alpha < beta) {
        return Err(FlowError::Parameter(format!("FTS needs 0 < alpha < beta, got alpha = {alpha}, beta = {beta}")));
    }
    let v = trajectory.weighted(s);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let premise_met = v[0] < alpha;
    Ok(FtsVerdict { holds: !premise_met || max < beta, premise_met, alpha, beta, max_weighted_error: max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtcsVerdict {
    pub holds: bool,
    pub premise_met: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Start of the final stretch with `x̃ᵀSx̃ < β` (interpolated between
    /// nodes); `None` if the bound fails at `λ = 1`.
    pub lambda1: Option<f64>,
}

/// Finite-time contractive stability w.r.t. `(α, β, γ, S)`: stable for
/// `(α, γ)` and below `β` on some `[λ₁, 1]` with `λ₁ < 1`.
pub fn check_ftcs(
    trajectory: &ErrorTrajectory,
    alpha: f64,
    beta: f64,
    gamma: f64,
    s: &DMatrix<f64>,
) -> Result<FtcsVerdict> {
    if !(beta > 0.0 && beta < alpha && alpha < gamma) {
        return Err(FlowError::Parameter(format!(
            "FTCS needs 0 < beta < alpha < gamma, got alpha = {alpha}, beta = {beta}, gamma = {gamma}"
        )));
    }
    let v = trajectory.weighted(s);
    let premise_met = v[0] < alpha;
    let bounded = v.iter().all(|&x| x < gamma);
    let nodes = &trajectory.nodes;
    // Crossing into `V < β` for the last time, linearly interpolated.
    let lambda1 = match v.iter().rposition(|&x| x >= beta) {
        None => Some(nodes[0]),
        Some(i) if i + 1 == v.len() => None,
        Some(i) => {
            let t = (v[i] - beta) / (v[i] - v[i + 1]);
            Some(nodes[i] + t * (nodes[i + 1] - nodes[i]))
        }
    };
    Ok(FtcsVerdict { holds: !premise_met || (bounded && lambda1.is_some()), premise_met, alpha, beta, gamma, lambda1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtssVerdict {
    pub holds: bool,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Fraction of draws whose whole path stays at or below `β`.
    pub empirical_prob: f64,
    /// `1 − ε − 3·sqrt(ε(1−ε)/N)`.
    pub threshold: f64,
    /// `α/β + 3·sqrt(p(1−p)/N)` with `p = α/β`, the Markov bound on exceedance.
    pub markov_bound: f64,
    pub draws: usize,
}

pub const MIN_MC_DRAWS: usize = 100;

/// Monte Carlo finite-time stochastic stability w.r.t. `(α, β, ε, S)`.
///
/// Initial errors are differences of two prior draws, scaled so that
/// `E[x̃₀ᵀ S x̃₀] = α` exactly.
#[allow(clippy::too_many_arguments)]
pub fn check_ftss(
    params: &FlowParameterization,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
    s: &DMatrix<f64>,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    draws: usize,
    seed: u64,
    grid: &LambdaGrid,
) -> Result<FtssVerdict> {
    if !(alpha > 0.0 && alpha < beta) {
        return Err(FlowError::Parameter(format!("FTSS needs 0 < alpha < beta, got alpha = {alpha}, beta = {beta}")));
    }
    if !(alpha / beta <= epsilon && epsilon < 1.0) {
        return Err(FlowError::Parameter(format!("FTSS needs alpha/beta <= epsilon < 1, got epsilon = {epsilon}")));
    }
    if draws < MIN_MC_DRAWS {
        return Err(FlowError::Parameter(format!("FTSS needs at least {MIN_MC_DRAWS} draws, got {draws}")));
    }
    let system = ErrorSystem::for_flow(params, grid, prior, meas)?;
    let phis = system.transition_matrices()?;
    // Weighted transition products Φᵀ S Φ turn each node check into a quadratic form.
    let weights: Vec<DMatrix<f64>> = phis.iter().map(|phi| phi.transpose() * s * phi).collect();
    let initial = initial_error_draws(prior, s, alpha, draws, seed);
    let inside: usize = initial.par_iter().map(|x0| usize::from(weights.iter().all(|w| quad(x0, w) <= beta))).sum();
    let n = draws as f64;
    let empirical_prob = inside as f64 / n;
    let threshold = 1.0 - epsilon - 3.0 * (epsilon * (1.0 - epsilon) / n).sqrt();
    let p = alpha / beta;
    Ok(FtssVerdict {
        holds: empirical_prob >= threshold,
        alpha,
        beta,
        epsilon,
        empirical_prob,
        threshold,
        markov_bound: p + 3.0 * (p * (1.0 - p) / n).sqrt(),
        draws,
    })
}

/// Differences of prior draws scaled so `E[x̃₀ᵀ S x̃₀] = α`.
pub fn initial_error_draws(
    prior: &GaussianPrior,
    s: &DMatrix<f64>,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let n = prior.dim();
    let l = prior.cov_factor();
    // Cov(x_a − x_b) = 2 P_g, so E[x̃ᵀSx̃] = 2 tr(S P_g).
    let scale = (alpha / (2.0 * (s * prior.cov()).trace())).sqrt();
    let key = derive_seed(seed, purpose::ERROR_DRAW, 0);
    (0..draws as u64)
        .map(|i| {
            let mut stream = NoiseStream::new(key, i);
            let (mut a, mut b) = (DVector::zeros(n), DVector::zeros(n));
            stream.normals_at(0, a.as_mut_slice());
            stream.normals_at(1, b.as_mut_slice());
            &l * (a - b) * scale
        })
        .collect()
}

/// `Q(λ)` at every grid node.
fn diffusions(
    params: &FlowParameterization,
    grid: &LambdaGrid,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<Vec<(f64, DMatrix<f64>)>> {
    grid.nodes().iter().map(|&l| crate::flow::affine_coefficients(l, params, prior, meas).map(|c| (l, c.q))).collect()
}

/// `σ = inf_λ λ_min(Q(λ)) · λ_min(S)`, clamped at zero. `Q₀` is taken as
/// the isotropic lower bound `(min_k λ_min(Q(λ_k))) I`.
pub fn contraction_rate(
    params: &FlowParameterization,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
    grid: &LambdaGrid,
) -> Result<f64> {
    let q_floor =
        diffusions(params, grid, prior, meas)?.iter().map(|(_, q)| min_sym_eigenvalue(q)).fold(f64::INFINITY, f64::min);
    Ok((q_floor * min_sym_eigenvalue(prior.precision())).max(0.0))
}

/// Propagates unit `S`-ellipsoid errors through the exact flow and returns
/// `max |V_M(λ) − 1|` over particles and nodes.
pub fn ellipsoid_invariance_check(
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
    grid: &LambdaGrid,
    n_particles: usize,
    seed: u64,
) -> Result<f64> {
    if n_particles == 0 {
        return Ok(0.0);
    }
    let system = ErrorSystem::for_flow(&FlowParameterization::exact(), grid, prior, meas)?;
    let s = prior.precision();
    let starts = initial_error_draws(prior, s, 1.0, n_particles, seed);
    let mut worst = 0.0_f64;
    for x0 in starts {
        let unit = &x0 / quad(&x0, s).sqrt();
        let traj = system.trajectory(&unit, s)?;
        worst = traj.v_m.iter().fold(worst, |acc, v| acc.max((v - 1.0).abs()));
    }
    Ok(worst)
}

/// Error-dynamics regime by diffusion level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `Q ≡ 0`: `x̃ᵀMx̃` constant, `x̃ᵀSx̃` non-increasing.
    ConstantV,
    /// `Q ⪰ 0` with `inf λ_min(Q) = 0`: both non-increasing.
    NonIncreasing,
    /// `Q ⪰ Q₀ ≻ 0`: `x̃ᵀSx̃` decays at least like `e^{−σλ}`.
    ExponentialDecay,
}

pub fn classify_regime(
    params: &FlowParameterization,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
    grid: &LambdaGrid,
) -> Result<Regime> {
    let qs = diffusions(params, grid, prior, meas)?;
    let zero_tol = zero_diffusion_tol(prior);
    let mut q_max = 0.0_f64;
    let mut floor = f64::INFINITY;
    for (l, q) in &qs {
        let eig = sym_eigenvalues(q);
        let norm = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let min = eig.first().copied().unwrap_or(0.0);
        if min < -PSD_REL_TOL * norm {
            return Err(FlowError::Inadmissible { lambda: Some(*l), min_eigenvalue: min });
        }
        q_max = q_max.max(norm);
        floor = floor.min(min);
    }
    Ok(if q_max <= zero_tol {
        Regime::ConstantV
    } else if floor > PSD_REL_TOL * q_max {
        Regime::ExponentialDecay
    } else {
        Regime::NonIncreasing
    })
}

/// Thresholds for the three stability definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub fts_alpha: f64,
    pub fts_beta: f64,
    pub ftcs_alpha: f64,
    pub ftcs_beta: f64,
    pub ftcs_gamma: f64,
    pub ftss_alpha: f64,
    pub ftss_beta: f64,
    pub ftss_epsilon: f64,
    pub mc_draws: usize,
    /// Particles for the ellipsoid check when the flow is deterministic.
    pub ellipsoid_particles: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            fts_alpha: 1.0,
            fts_beta: 2.0,
            ftcs_alpha: 1.0,
            ftcs_beta: 0.75,
            ftcs_gamma: 2.0,
            ftss_alpha: 1.0,
            ftss_beta: 4.0,
            ftss_epsilon: 0.25,
            mc_draws: 1000,
            ellipsoid_particles: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub fts: FtsVerdict,
    pub ftcs: FtcsVerdict,
    pub ftss: FtssVerdict,
    /// Weight matrix used by all three checks.
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    pub sigma: f64,
    pub regime: Regime,
    /// `max |V_M − α|/α` for the exact flow; absent for stochastic flows.
    pub ellipsoid_deviation: Option<f64>,
    pub grid_steps: usize,
}

/// Report plus the trajectory it was computed from.
#[derive(Debug, Clone)]
pub struct StabilityAnalysis {
    pub report: StabilityReport,
    pub trajectory: ErrorTrajectory,
}

/// Runs every check on `grid` and on the doubled grid; verdicts must agree.
pub fn stability_report(
    params: &FlowParameterization,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
    grid: &LambdaGrid,
    config: &StabilityConfig,
    seed: u64,
) -> Result<StabilityAnalysis> {
    let coarse = stability_once(params, prior, meas, grid, config, seed)?;
    let fine = stability_once(params, prior, meas, &grid.refined(), config, seed)?;
    let pairs = [
        ("fts", coarse.report.fts.holds, fine.report.fts.holds),
        ("ftcs", coarse.report.ftcs.holds, fine.report.ftcs.holds),
        ("ftss", coarse.report.ftss.holds, fine.report.ftss.holds),
    ];
    if let Some((name, _, _)) = pairs.iter().find(|(_, a, b)| a != b) {
        return Err(FlowError::GridSensitive(name));
    }
    if coarse.report.regime != fine.report.regime {
        return Err(FlowError::GridSensitive("regime"));
    }
    Ok(coarse)
}

fn stability_once(
    params: &FlowParameterization,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
    grid: &LambdaGrid,
    config: &StabilityConfig,
    seed: u64,
) -> Result<StabilityAnalysis> {
    let s = prior.precision();
    let system = ErrorSystem::for_flow(params, grid, prior, meas)?;
    let direction = initial_error_draws(prior, s, 1.0, 1, seed).remove(0);
    let level = 0.99 * config.fts_alpha.min(config.ftcs_alpha);
    let x0 = &direction * (level / quad(&direction, s)).sqrt();
    let trajectory = system.trajectory(&x0, s)?;
    let fts = check_fts(&trajectory, config.fts_alpha, config.fts_beta, s)?;
    let ftcs = check_ftcs(&trajectory, config.ftcs_alpha, config.ftcs_beta, config.ftcs_gamma, s)?;
    let ftss = check_ftss(
        params,
        prior,
        meas,
        s,
        config.ftss_alpha,
        config.ftss_beta,
        config.ftss_epsilon,
        config.mc_draws,
        seed,
        grid,
    )?;
    let regime = classify_regime(params, prior, meas, grid)?;
    let sigma = contraction_rate(params, prior, meas, grid)?;
    let ellipsoid_deviation = if regime == Regime::ConstantV {
        Some(ellipsoid_invariance_check(prior, meas, grid, config.ellipsoid_particles, seed)?)
    } else {
        None
    };
    Ok(StabilityAnalysis {
        report: StabilityReport {
            fts,
            ftcs,
            ftss,
            s: matrix_to_rows(s),
            sigma,
            regime,
            ellipsoid_deviation,
            grid_steps: grid.steps(),
        },
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{canonical, random_instance};
    use approx::assert_relative_eq;

    fn grid(steps: usize) -> LambdaGrid {
        LambdaGrid::uniform(steps, Scheme::DeterministicRk4).unwrap()
    }

    fn one(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn unstable_system(steps: usize) -> ErrorSystem {
        ErrorSystem::from_fns(&grid(steps), |_| DMatrix::identity(1, 1), |_| DMatrix::identity(1, 1))
    }

    #[test]
    fn identical_starts_give_zero_error() {
        let (prior, meas) = canonical();
        let t =
            error_trajectory(&one(0.4), &one(0.4), &FlowParameterization::fixed_q(), &grid(50), &prior, &meas).unwrap();
        assert!(t.errors.iter().all(|e| e[0] == 0.0));
        assert!(t.v_m.iter().chain(&t.v_s).all(|&v| v == 0.0));
    }

    #[test]
    fn exact_flow_error_decays_like_inverse_sqrt() {
        let (prior, meas) = canonical();
        let t =
            error_trajectory(&one(1.0), &one(0.0), &FlowParameterization::exact(), &grid(1000), &prior, &meas).unwrap();
        for (l, e) in t.nodes.iter().zip(&t.errors) {
            assert_relative_eq!(e[0], (1.0 + l).powf(-0.5), epsilon = 1e-10);
        }
        assert_relative_eq!(t.errors.last().unwrap()[0], 0.5_f64.sqrt(), epsilon = 1e-6);
        // V_M = (1+λ) x̃² stays at x̃₀²
        assert!(t.v_m.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(t.v_m.iter().zip(&t.v_s).all(|(m, s)| m >= s));
    }

    #[test]
    fn unit_diffusion_contracts_by_e() {
        let (prior, meas) = canonical();
        let params = FlowParameterization::constant_q(DMatrix::identity(1, 1)).unwrap();
        let t = error_trajectory(&one(1.0), &one(0.0), &params, &grid(1000), &prior, &meas).unwrap();
        assert!(t.v_s.last().unwrap() / t.v_s[0] <= (-1.0_f64).exp());
        assert_relative_eq!(contraction_rate(&params, &prior, &meas, &grid(100)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_derivative_examples() {
        let (prior, meas) = canonical();
        let d = homotopy_derivatives(&one(0.0), 0.0, &prior, &meas).unwrap();
        assert_eq!(lyapunov_derivative(&one(3.0), 0.0, &DMatrix::zeros(1, 1), &d), 0.0);
        assert_eq!(lyapunov_derivative(&one(1.0), 0.0, &DMatrix::identity(1, 1), &d), -1.0);
    }

    #[test]
    fn fts_examples() {
        let eye = DMatrix::identity(1, 1);
        let sys = unstable_system(1000);
        let t = sys.trajectory(&one(0.99), &eye).unwrap();
        let v = check_fts(&t, 1.0, 2.0, &eye).unwrap();
        assert!(v.premise_met && !v.holds);
        assert_relative_eq!(v.max_weighted_error, 0.9801 * 1.0_f64.exp().powi(2), epsilon = 1e-8);
        // premise false → vacuous
        let t = sys.trajectory(&one(1.5), &eye).unwrap();
        assert!(check_fts(&t, 1.0, 2.0, &eye).unwrap().holds);
        assert!(check_fts(&t, 2.0, 2.0, &eye).is_err());
    }

    #[test]
    fn ftcs_exact_flow_examples() {
        // x̃(λ)² = x̃₀²/(1+λ), so V_S(1) = x̃₀²/2.
        let (prior, meas) = canonical();
        let s = prior.precision().clone();
        let alpha = 1.0;
        let x0 = (alpha - 1e-3_f64).sqrt();
        let t =
            error_trajectory(&one(x0), &one(0.0), &FlowParameterization::exact(), &grid(1000), &prior, &meas).unwrap();
        let ok = check_ftcs(&t, alpha, 0.6 * alpha, 2.0, &s).unwrap();
        assert!(ok.holds);
        // x̃₀²/(1+λ₁) = 0.6
        let expected = (x0 * x0) / 0.6 - 1.0;
        assert!((ok.lambda1.unwrap() - expected).abs() < 1e-6);
        assert!(!check_ftcs(&t, alpha, 0.4 * alpha, 2.0, &s).unwrap().holds);
        assert!(!check_ftcs(&t, alpha, 0.01 * alpha, 2.0, &s).unwrap().holds);

        let zero =
            error_trajectory(&one(0.0), &one(0.0), &FlowParameterization::exact(), &grid(10), &prior, &meas).unwrap();
        let v = check_ftcs(&zero, alpha, 0.5, 2.0, &s).unwrap();
        assert!(v.holds);
        assert_eq!(v.lambda1, Some(0.0));
        assert!(check_ftcs(&zero, 1.0, 1.5, 2.0, &s).is_err());
    }

    #[test]
    fn ftss_examples_and_parameter_checks() {
        let (prior, meas) = canonical();
        let s = prior.precision().clone();
        let params = FlowParameterization::constant_q(DMatrix::identity(1, 1)).unwrap();
        let g = grid(200).with_scheme(Scheme::EulerMaruyama);
        let v = check_ftss(&params, &prior, &meas, &s, 1.0, 4.0, 0.25, 10_000, 5, &g).unwrap();
        assert!(v.holds && v.empirical_prob >= 0.75);
        assert!(1.0 - v.empirical_prob <= v.markov_bound);
        let huge = check_ftss(&params, &prior, &meas, &s, 1.0, 1e12, 0.25, 200, 5, &g).unwrap();
        assert_eq!(huge.empirical_prob, 1.0);
        assert!(check_ftss(&params, &prior, &meas, &s, 1.0, 4.0, 0.2, 1000, 5, &g).is_err());
        assert!(check_ftss(&params, &prior, &meas, &s, 1.0, 4.0, 0.25, 50, 5, &g).is_err());
        assert!(check_ftss(&params, &prior, &meas, &s, 5.0, 4.0, 0.25, 1000, 5, &g).is_err());
    }

    #[test]
    fn initial_draws_hit_target_expectation() {
        let model = random_instance(2, 3, 2);
        let s = model.prior.precision();
        let draws = initial_error_draws(&model.prior, s, 2.5, 40_000, 1);
        let mean = draws.iter().map(|x| quad(x, s)).sum::<f64>() / draws.len() as f64;
        // x̃ᵀSx̃ / (α/6) ~ χ²₃, sd of the sample mean = α·sqrt(2·3)/3/sqrt(N)
        assert!((mean - 2.5).abs() < 4.0 * 2.5 * (6.0_f64).sqrt() / 3.0 / 200.0);
    }

    #[test]
    fn regime_examples() {
        let (prior, meas) = canonical();
        let g = grid(50).with_scheme(Scheme::EulerMaruyama);
        assert_eq!(classify_regime(&FlowParameterization::exact(), &prior, &meas, &g).unwrap(), Regime::ConstantV);
        assert_eq!(contraction_rate(&FlowParameterization::exact(), &prior, &meas, &g).unwrap(), 0.0);

        let model = random_instance(12, 3, 1); // rank-1 information
        assert_eq!(
            classify_regime(&FlowParameterization::fixed_q(), &model.prior, &model.meas, &g).unwrap(),
            Regime::NonIncreasing
        );
        let iso = FlowParameterization::constant_q(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(classify_regime(&iso, &model.prior, &model.meas, &g).unwrap(), Regime::ExponentialDecay);
        let sigma = contraction_rate(&iso, &model.prior, &model.meas, &g).unwrap();
        assert_relative_eq!(sigma, min_sym_eigenvalue(model.prior.precision()), epsilon = 1e-9);
    }

    #[test]
    fn ellipsoid_examples() {
        let (prior, meas) = canonical();
        assert_eq!(ellipsoid_invariance_check(&prior, &meas, &grid(10), 0, 1).unwrap(), 0.0);
        assert!(ellipsoid_invariance_check(&prior, &meas, &grid(1000), 8, 1).unwrap() < 1e-10);
    }

    #[test]
    fn report_for_exact_flow() {
        let (prior, meas) = canonical();
        let g = grid(200).with_scheme(Scheme::EulerMaruyama);
        let a = stability_report(&FlowParameterization::exact(), &prior, &meas, &g, &StabilityConfig::default(), 3)
            .unwrap();
        assert_eq!(a.report.regime, Regime::ConstantV);
        assert!(a.report.fts.holds && a.report.ftcs.holds && a.report.ftss.holds);
        assert!(a.report.ellipsoid_deviation.unwrap() < 1e-8);
        let json = serde_json::to_value(&a.report).unwrap();
        assert_eq!(json["regime"], "ConstantV");
        assert!(a.trajectory.to_csv().starts_with("lambda,V_M,V_S\n"));
    }
}
