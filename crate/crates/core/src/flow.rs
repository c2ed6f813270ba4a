//! The parameterized family of linear flows.
//!
//! Every member is indexed by a matrix `K(λ)`. With `M(λ) = −∇∇ᵀ log p`,
//! `J = −∇∇ᵀ log h = HᵀR⁻¹H` and `Hp = ∇∇ᵀ log p = −M`:
//!
//! ```text
//! f(x, λ) = Hp⁻¹ [ −∇ log h + K Hp⁻¹ ∇ log p ]      drift
//! Q(λ)    = Hp⁻¹ ( J + K + Kᵀ ) Hp⁻¹                 diffusion
//! K(λ)    = ½ Hp Q Hp + ½ ∇∇ᵀ log h                  inverse map
//! A(λ)    = Hp⁻¹ ( J + K ),   b(λ) = f(0, λ)          affine form
//! ```
//!
//! `K` is admissible when `K + Kᵀ + J ⪰ 0`, which is exactly when `Q ⪰ 0`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::{ensure_dim, ensure_finite_matrix, is_psd, matrix_from_rows, min_sym_eigenvalue, symmetrize};
use crate::model::{check_lambda, homotopy_derivatives, GaussianPrior, HomotopyDerivatives, LinearMeasurement};

/// Relative eigenvalue tolerance for admissibility and PSD checks.
pub const PSD_REL_TOL: f64 = 1e-10;
/// Below `-FACTOR_REL_TOL·‖Q‖` a diffusion matrix is rejected as indefinite.
pub const FACTOR_REL_TOL: f64 = 1e-8;
/// Number of uniform λ points used to validate a parameterization.
pub const DEFAULT_VALIDATION_POINTS: usize = 101;

/// A λ-indexed matrix. Must be a pure function of λ.
pub type MatrixSchedule = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub enum FlowKind {
    /// `K = ½ ∇∇ᵀ log h`, so `Q ≡ 0`.
    ExactFlow,
    /// `K = 0`.
    FixedQ,
    /// Constant diffusion `Q₀`; `K(λ)` follows from the inverse map.
    ConstantQ(DMatrix<f64>),
    /// Arbitrary user schedule `λ ↦ K(λ)`.
    KSchedule(MatrixSchedule),
    /// Built from a linear reference flow with gradient `Â(λ)` and a chosen
    /// diffusion `Q(λ)`: `K = [Hp Q − Âᵀ] Hp`.
    ReferenceFlow { a_hat: MatrixSchedule, q: MatrixSchedule },
}

impl fmt::Debug for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowKind::ExactFlow => f.write_str("ExactFlow"),
            FlowKind::FixedQ => f.write_str("FixedQ"),
            FlowKind::ConstantQ(q) => f.debug_tuple("ConstantQ").field(q).finish(),
            FlowKind::KSchedule(_) => f.write_str("KSchedule(<fn>)"),
            FlowKind::ReferenceFlow { .. } => f.write_str("ReferenceFlow(<fn>, <fn>)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowParameterization {
    pub kind: FlowKind,
    pub description: String,
}

impl FlowParameterization {
    pub fn exact() -> Self {
        Self { kind: FlowKind::ExactFlow, description: "exact flow (Q = 0)".into() }
    }

    pub fn fixed_q() -> Self {
        Self { kind: FlowKind::FixedQ, description: "fixed-Q flow (K = 0)".into() }
    }

    pub fn constant_q(q0: DMatrix<f64>) -> Result<Self> {
        if !q0.is_square() {
            return Err(FlowError::Parameter("Q0 must be square".into()));
        }
        ensure_finite_matrix(&q0, "Q0")?;
        let q0 = symmetrize(&q0);
        if !is_psd(&q0, PSD_REL_TOL) {
            return Err(FlowError::Inadmissible { lambda: None, min_eigenvalue: min_sym_eigenvalue(&q0) });
        }
        Ok(Self { kind: FlowKind::ConstantQ(q0), description: "constant diffusion Q0".into() })
    }

    pub fn k_schedule(schedule: MatrixSchedule, description: impl Into<String>) -> Self {
        Self { kind: FlowKind::KSchedule(schedule), description: description.into() }
    }

    pub fn reference_flow(a_hat: MatrixSchedule, q: MatrixSchedule, description: impl Into<String>) -> Self {
        Self { kind: FlowKind::ReferenceFlow { a_hat, q }, description: description.into() }
    }

    /// The parameter matrix `K(λ)` at the λ carried by `derivs`.
    pub fn k_at(&self, derivs: &HomotopyDerivatives) -> Result<DMatrix<f64>> {
        let n = derivs.dim();
        let lambda = derivs.lambda;
        let k = match &self.kind {
            FlowKind::ExactFlow => &derivs.hess_log_h * 0.5,
            FlowKind::FixedQ => DMatrix::zeros(n, n),
            FlowKind::ConstantQ(q0) => {
                ensure_dim("Q0", n, q0.nrows())?;
                k_from_q(q0, derivs)?
            }
            FlowKind::KSchedule(schedule) => schedule(lambda),
            FlowKind::ReferenceFlow { a_hat, q } => {
                let a_hat = a_hat(lambda);
                let q = q(lambda);
                ensure_dim("reference gradient", n, a_hat.nrows())?;
                ensure_dim("reference gradient", n, a_hat.ncols())?;
                ensure_dim("reference Q", n, q.nrows())?;
                ensure_dim("reference Q", n, q.ncols())?;
                reference_flow_k(&a_hat, &q, derivs)
            }
        };
        ensure_dim("K rows", n, k.nrows())?;
        ensure_dim("K cols", n, k.ncols())?;
        ensure_finite_matrix(&k, "K")?;
        Ok(k)
    }

    /// Checks admissibility and PSD diffusion on `points` uniform λ values,
    /// evaluating each schedule twice to catch non-deterministic callables.
    pub fn validate(&self, prior: &GaussianPrior, meas: &LinearMeasurement, points: usize) -> Result<()> {
        let points = points.max(2);
        for i in 0..points {
            let lambda = i as f64 / (points - 1) as f64;
            let derivs = homotopy_derivatives(prior.mean(), lambda, prior, meas)?;
            let k = self.k_at(&derivs)?;
            if k != self.k_at(&derivs)? {
                return Err(FlowError::Parameter(format!(
                    "parameter schedule '{}' is not deterministic at lambda = {lambda}",
                    self.description
                )));
            }
            let margin = admissibility_margin(&k, &derivs);
            if !margin.admissible {
                return Err(FlowError::Inadmissible { lambda: Some(lambda), min_eigenvalue: margin.min_eigenvalue });
            }
            let q = q_from_k(&k, &derivs)?;
            if !is_psd(&q, PSD_REL_TOL) {
                return Err(FlowError::Inadmissible { lambda: Some(lambda), min_eigenvalue: min_sym_eigenvalue(&q) });
            }
        }
        Ok(())
    }
}

/// `K = [Hp Q − Âᵀ] Hp` for a linear reference flow with gradient `Â`.
pub fn reference_flow_k(a_hat: &DMatrix<f64>, q: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> DMatrix<f64> {
    let hp = &derivs.hess_log_p;
    (hp * q - a_hat.transpose()) * hp
}

/// `A(λ)`, `b(λ)`, `Q(λ)` and the `K(λ)` that produced them.
#[derive(Debug, Clone)]
pub struct AffineFlowCoefficients {
    pub lambda: f64,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

impl AffineFlowCoefficients {
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }
}

fn square_check(k: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> Result<()> {
    ensure_dim("K rows", derivs.dim(), k.nrows())?;
    ensure_dim("K cols", derivs.dim(), k.ncols())
}

/// `M⁻¹ X M⁻¹` via two Cholesky solves.
fn sandwich_inverse(x: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> DMatrix<f64> {
    let left = derivs.solve_m(x);
    derivs.solve_m(&left.transpose()).transpose()
}

/// Diffusion matrix for a given `K`.
pub fn q_from_k(k: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> Result<DMatrix<f64>> {
    square_check(k, derivs)?;
    let middle = -&derivs.hess_log_h + k + k.transpose();
    let q = symmetrize(&sandwich_inverse(&middle, derivs));
    ensure_finite_matrix(&q, "Q").map_err(|_| FlowError::Singular("M(lambda)"))?;
    Ok(q)
}

/// Parameter matrix reproducing a given PSD diffusion `Q`.
pub fn k_from_q(q: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> Result<DMatrix<f64>> {
    square_check(q, derivs)?;
    if !is_psd(q, PSD_REL_TOL) {
        return Err(FlowError::Inadmissible { lambda: Some(derivs.lambda), min_eigenvalue: min_sym_eigenvalue(q) });
    }
    let hp = &derivs.hess_log_p;
    Ok(symmetrize(&((hp * q * hp) * 0.5 + &derivs.hess_log_h * 0.5)))
}

/// Result of the admissibility test on `K + Kᵀ − ∇∇ᵀ log h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibilityMargin {
    pub min_eigenvalue: f64,
    pub norm: f64,
    pub admissible: bool,
}

pub fn admissibility_margin(k: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> AdmissibilityMargin {
    let test = k + k.transpose() - &derivs.hess_log_h;
    let eig = crate::linalg::sym_eigenvalues(&test);
    let norm = eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let min_eigenvalue = eig.first().copied().unwrap_or(0.0);
    AdmissibilityMargin { min_eigenvalue, norm, admissible: min_eigenvalue >= -PSD_REL_TOL * norm }
}

pub fn is_admissible(k: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> bool {
    k.nrows() == derivs.dim() && k.ncols() == derivs.dim() && admissibility_margin(k, derivs).admissible
}

fn drift_from(k: &DMatrix<f64>, derivs: &HomotopyDerivatives) -> DVector<f64> {
    // f = M⁻¹ [ ∇log h + K M⁻¹ ∇log p ]
    let inner = derivs.solve_m_vec(&derivs.grad_log_p());
    derivs.solve_m_vec(&(&derivs.grad_log_h + k * inner))
}

/// Drift `f(x, λ)` evaluated directly from the gradients.
pub fn drift(
    x: &DVector<f64>,
    lambda: f64,
    k: &DMatrix<f64>,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<DVector<f64>> {
    let derivs = homotopy_derivatives(x, lambda, prior, meas)?;
    square_check(k, &derivs)?;
    Ok(drift_from(k, &derivs))
}

/// Affine coefficients for an explicit `K` at one λ.
pub fn affine_from_k(
    lambda: f64,
    k: &DMatrix<f64>,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<AffineFlowCoefficients> {
    let origin = DVector::zeros(prior.dim());
    let derivs = homotopy_derivatives(&origin, lambda, prior, meas)?;
    square_check(k, &derivs)?;
    let margin = admissibility_margin(k, &derivs);
    if !margin.admissible {
        return Err(FlowError::Inadmissible { lambda: Some(lambda), min_eigenvalue: margin.min_eigenvalue });
    }
    // A = Hp⁻¹(J + K) = −M⁻¹(J + K)
    let a = -derivs.solve_m(&(-&derivs.hess_log_h + k));
    let b = drift_from(k, &derivs);
    let q = q_from_k(k, &derivs)?;
    Ok(AffineFlowCoefficients { lambda, a, b, q, k: k.clone() })
}

pub fn affine_coefficients(
    lambda: f64,
    params: &FlowParameterization,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<AffineFlowCoefficients> {
    check_lambda(lambda)?;
    let derivs = homotopy_derivatives(prior.mean(), lambda, prior, meas)?;
    let k = params.k_at(&derivs)?;
    affine_from_k(lambda, &k, prior, meas)
}

/// Closed-form exact-flow coefficients:
///
/// ```text
/// A₁ = −½ P_g Hᵀ (λ H P_g Hᵀ + R)⁻¹ H
/// b₁ = (I + 2λA₁) [ (I + λA₁) P_g Hᵀ R⁻¹ z + A₁ x_prior ]
/// ```
pub fn exact_flow_coefficients(
    lambda: f64,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<AffineFlowCoefficients> {
    check_lambda(lambda)?;
    ensure_dim("H cols", prior.dim(), meas.state_dim())?;
    let n = prior.dim();
    let p = prior.cov();
    let h = meas.h();
    let pht = p * h.transpose();
    let innov_cov = symmetrize(&(h * &pht * lambda + meas.r()));
    let chol = crate::linalg::cholesky(&innov_cov, "lambda H P_g H^T + R")?;
    let a1 = -(&pht * chol.solve(h)) * 0.5;
    let eye = DMatrix::<f64>::identity(n, n);
    // P_g Hᵀ R⁻¹ z
    let gain_z = p * meas.information_z();
    let inner = (&eye + &a1 * lambda) * gain_z + &a1 * prior.mean();
    let b1 = (&eye + &a1 * (2.0 * lambda)) * inner;
    let derivs = homotopy_derivatives(prior.mean(), lambda, prior, meas)?;
    Ok(AffineFlowCoefficients { lambda, a: a1, b: b1, q: DMatrix::zeros(n, n), k: &derivs.hess_log_h * 0.5 })
}

/// Right-hand side of the flow condition
/// `−Hp f − ∇div f − (∇f)ᵀ ∇log p + ∇[(1/2p) ∇ᵀ(pQ) ∇]` for the affine
/// drift built from `K`; it equals `∇ log h` exactly when the flow is valid.
///
/// For affine drift `∇div f = 0`, `∇f = A`, and for x-independent `Q` the
/// last term reduces to `Hp Q ∇log p`.
pub fn flow_condition_rhs(
    x: &DVector<f64>,
    lambda: f64,
    k: &DMatrix<f64>,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<DVector<f64>> {
    let coeffs = affine_from_k(lambda, k, prior, meas)?;
    let derivs = homotopy_derivatives(x, lambda, prior, meas)?;
    let f = coeffs.drift(x);
    let grad_log_p = derivs.grad_log_p();
    let hp = &derivs.hess_log_p;
    Ok(-(hp * f) - coeffs.a.transpose() * &grad_log_p + hp * (&coeffs.q * &grad_log_p))
}

/// Factor `q` (n×m, m = numerical rank) with `q qᵀ = Q`.
///
/// Eigenvalues in `[−1e-8‖Q‖, 1e-12‖Q‖]` are treated as zero; anything more
/// negative is rejected.
pub fn diffusion_factor(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !q.is_square() {
        return Err(FlowError::Parameter("diffusion matrix must be square".into()));
    }
    ensure_finite_matrix(q, "Q")?;
    let n = q.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(q));
    let norm = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -FACTOR_REL_TOL * norm {
        return Err(FlowError::Inadmissible { lambda: None, min_eigenvalue: min });
    }
    let mut kept: Vec<(f64, usize)> =
        eig.eigenvalues.iter().enumerate().filter(|(_, &v)| v > 1e-12 * norm).map(|(i, &v)| (v, i)).collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut factor = DMatrix::zeros(n, kept.len());
    for (col, &(value, idx)) in kept.iter().enumerate() {
        factor.set_column(col, &(eig.eigenvectors.column(idx) * value.sqrt()));
    }
    Ok(factor)
}

/// Named presets.
#[derive(Clone)]
pub enum Preset {
    ExactFlow,
    FixedQ,
    ConstantQ(DMatrix<f64>),
    /// `Q = αI`, reference flow = exact flow.
    DiagnosticNoise {
        alpha: f64,
    },
    /// Caller-supplied reference gradient and diffusion.
    Approximate {
        a_hat: MatrixSchedule,
        q: MatrixSchedule,
    },
}

impl fmt::Debug for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::ExactFlow => f.write_str("ExactFlow"),
            Preset::FixedQ => f.write_str("FixedQ"),
            Preset::ConstantQ(q) => f.debug_tuple("ConstantQ").field(q).finish(),
            Preset::DiagnosticNoise { alpha } => f.debug_struct("DiagnosticNoise").field("alpha", alpha).finish(),
            Preset::Approximate { .. } => f.write_str("Approximate(<fn>, <fn>)"),
        }
    }
}

/// Builds a preset and validates it on the default λ grid.
pub fn preset(kind: Preset, prior: &GaussianPrior, meas: &LinearMeasurement) -> Result<FlowParameterization> {
    let params = match kind {
        Preset::ExactFlow => FlowParameterization::exact(),
        Preset::FixedQ => FlowParameterization::fixed_q(),
        Preset::ConstantQ(q0) => {
            ensure_dim("Q0", prior.dim(), q0.nrows())?;
            FlowParameterization::constant_q(q0)?
        }
        Preset::DiagnosticNoise { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(FlowError::Parameter(format!("diagnostic noise alpha must be positive, got {alpha}")));
            }
            let n = prior.dim();
            let (p, m) = (prior.clone(), meas.clone());
            let a_hat: MatrixSchedule = Arc::new(move |lambda| {
                exact_flow_coefficients(lambda.clamp(0.0, 1.0), &p, &m)
                    .map(|c| c.a)
                    .unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN))
            });
            let q: MatrixSchedule = Arc::new(move |_| DMatrix::identity(n, n) * alpha);
            FlowParameterization::reference_flow(a_hat, q, format!("diagnostic noise flow (alpha = {alpha})"))
        }
        Preset::Approximate { a_hat, q } => {
            FlowParameterization::reference_flow(a_hat, q, "approximate flow from reference gradient")
        }
    };
    params.validate(prior, meas, DEFAULT_VALIDATION_POINTS)?;
    Ok(params)
}

/// Flow descriptor as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flow", rename_all = "snake_case", try_from = "RawDescriptor")]
pub enum FlowDescriptor {
    Exact,
    FixedQ,
    ConstantQ {
        #[serde(rename = "Q0")]
        q0: Vec<Vec<f64>>,
    },
    Diagnostic {
        alpha: f64,
    },
}

/// Flat form used for parsing: serde's internally tagged enums silently
/// accept extra keys on unit variants, so the field set is checked here.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescriptor {
    flow: String,
    #[serde(rename = "Q0")]
    q0: Option<Vec<Vec<f64>>>,
    alpha: Option<f64>,
}

impl TryFrom<RawDescriptor> for FlowDescriptor {
    type Error = String;

    fn try_from(raw: RawDescriptor) -> std::result::Result<Self, String> {
        let unexpected = |field: &str| format!("flow \"{}\" does not take field \"{field}\"", raw.flow);
        match (raw.flow.as_str(), raw.q0.is_some(), raw.alpha.is_some()) {
            ("exact" | "fixed_q", true, _) | ("diagnostic", true, _) => Err(unexpected("Q0")),
            ("exact" | "fixed_q" | "constant_q", _, true) => Err(unexpected("alpha")),
            ("exact", ..) => Ok(FlowDescriptor::Exact),
            ("fixed_q", ..) => Ok(FlowDescriptor::FixedQ),
            ("constant_q", ..) => raw
                .q0
                .map(|q0| FlowDescriptor::ConstantQ { q0 })
                .ok_or_else(|| "flow \"constant_q\" needs field \"Q0\"".to_string()),
            ("diagnostic", ..) => raw
                .alpha
                .map(|alpha| FlowDescriptor::Diagnostic { alpha })
                .ok_or_else(|| "flow \"diagnostic\" needs field \"alpha\"".to_string()),
            (other, ..) => Err(format!("unknown flow \"{other}\" (expected exact, fixed_q, constant_q or diagnostic)")),
        }
    }
}

impl FlowDescriptor {
    pub fn to_preset(&self) -> Result<Preset> {
        Ok(match self {
            FlowDescriptor::Exact => Preset::ExactFlow,
            FlowDescriptor::FixedQ => Preset::FixedQ,
            FlowDescriptor::ConstantQ { q0 } => Preset::ConstantQ(matrix_from_rows(q0, "Q0")?),
            FlowDescriptor::Diagnostic { alpha } => Preset::DiagnosticNoise { alpha: *alpha },
        })
    }

    pub fn build(&self, prior: &GaussianPrior, meas: &LinearMeasurement) -> Result<FlowParameterization> {
        preset(self.to_preset()?, prior, meas)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FlowDescriptor::Exact => "exact",
            FlowDescriptor::FixedQ => "fixed_q",
            FlowDescriptor::ConstantQ { .. } => "constant_q",
            FlowDescriptor::Diagnostic { .. } => "diagnostic",
        }
    }
}

/// `(config name, summary)` for every preset reachable from a config file.
pub fn preset_catalog() -> Vec<(&'static str, &'static str)> {
    vec![
        ("exact", "deterministic exact flow; K = 1/2 hess log h, Q = 0"),
        ("fixed_q", "stochastic flow with K = 0; Q = M^-1 H^T R^-1 H M^-1"),
        ("constant_q", "constant diffusion Q0 (field \"Q0\"); K from the inverse map"),
        ("diagnostic", "diagnostic noise flow, Q = alpha I (field \"alpha\"), exact flow as reference"),
    ]
}
