//! Linear-Gaussian problem definition and the log-density derivatives of the
//! homotopy `log p(x, λ) = log g(x) + λ log h(x) − log c(λ)`.
//!
//! The normalizer `c(λ)` is never computed. Every consumer needs either
//! derivatives or log-density differences at a common `λ`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::{
    cholesky, ensure_dim, ensure_finite_matrix, ensure_finite_vector, matrix_from_rows, matrix_to_rows, symmetrize,
};

/// Gaussian prior `g(x) = N(x_prior, P_g)`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
}

impl GaussianPrior {
    /// Symmetrizes `cov` and checks it is positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(FlowError::Parameter("state dimension must be at least 1".into()));
        }
        ensure_dim("P_g rows", n, cov.nrows())?;
        ensure_dim("P_g cols", n, cov.ncols())?;
        ensure_finite_vector(&mean, "x_prior")?;
        ensure_finite_matrix(&cov, "P_g")?;
        let cov = symmetrize(&cov);
        let chol = cholesky(&cov, "P_g")?;
        let precision = symmetrize(&chol.inverse());
        Ok(Self { mean, cov, chol, precision })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of `P_g`.
    pub fn cov_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `S = P_g⁻¹ = −∇∇ᵀ log g`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `P_g⁻¹ v` via the Cholesky factor.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `log g(x)` without the Gaussian normalizer.
    pub fn log_density_unnormalized(&self, x: &DVector<f64>) -> Result<f64> {
        ensure_dim("x", self.dim(), x.len())?;
        let d = x - &self.mean;
        Ok(-0.5 * d.dot(&self.solve(&d)))
    }
}

/// Linear measurement `z = Hx + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    z: DVector<f64>,
    r_chol: Cholesky<f64, Dyn>,
    /// `HᵀR⁻¹H`
    information: DMatrix<f64>,
    /// `HᵀR⁻¹z`
    information_z: DVector<f64>,
}

impl LinearMeasurement {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>, z: DVector<f64>) -> Result<Self> {
        let d = z.len();
        if d == 0 {
            return Err(FlowError::Parameter("measurement dimension must be at least 1".into()));
        }
        ensure_dim("H rows", d, h.nrows())?;
        ensure_dim("R rows", d, r.nrows())?;
        ensure_dim("R cols", d, r.ncols())?;
        if h.ncols() == 0 {
            return Err(FlowError::Parameter("H must have at least one column".into()));
        }
        ensure_finite_matrix(&h, "H")?;
        ensure_finite_matrix(&r, "R")?;
        ensure_finite_vector(&z, "z")?;
        let r = symmetrize(&r);
        let r_chol = cholesky(&r, "R")?;
        let r_inv_h = r_chol.solve(&h);
        let information = symmetrize(&(h.transpose() * &r_inv_h));
        let information_z = r_inv_h.transpose() * &z;
        Ok(Self { h, r, z, r_chol, information, information_z })
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn meas_dim(&self) -> usize {
        self.z.len()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    /// `HᵀR⁻¹H = −∇∇ᵀ log h`.
    pub fn information(&self) -> &DMatrix<f64> {
        &self.information
    }

    /// `HᵀR⁻¹z`.
    pub fn information_z(&self) -> &DVector<f64> {
        &self.information_z
    }

    /// Same `H` and `R`, new measurement value.
    pub fn with_z(&self, z: DVector<f64>) -> Result<Self> {
        Self::new(self.h.clone(), self.r.clone(), z)
    }

    /// `log h(x)` without the Gaussian normalizer.
    pub fn log_likelihood_unnormalized(&self, x: &DVector<f64>) -> Result<f64> {
        ensure_dim("x", self.state_dim(), x.len())?;
        let innov = &self.z - &self.h * x;
        Ok(-0.5 * innov.dot(&self.r_chol.solve(&innov)))
    }
}

/// A prior/measurement pair with matching state dimension.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    pub prior: GaussianPrior,
    pub meas: LinearMeasurement,
}

impl LinearGaussianModel {
    pub fn new(prior: GaussianPrior, meas: LinearMeasurement) -> Result<Self> {
        ensure_dim("H cols", prior.dim(), meas.state_dim())?;
        Ok(Self { prior, meas })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| FlowError::Parse(e.to_string()))?;
        file.into_model()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            x_prior: self.prior.mean().iter().copied().collect(),
            p_g: matrix_to_rows(self.prior.cov()),
            h: matrix_to_rows(self.meas.h()),
            r: matrix_to_rows(self.meas.r()),
            z: self.meas.z().iter().copied().collect(),
        }
    }
}

/// On-disk model layout. Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub x_prior: Vec<f64>,
    #[serde(rename = "P_g")]
    pub p_g: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub z: Vec<f64>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<LinearGaussianModel> {
        let prior = GaussianPrior::new(DVector::from_vec(self.x_prior), matrix_from_rows(&self.p_g, "P_g")?)?;
        let meas = LinearMeasurement::new(
            matrix_from_rows(&self.h, "H")?,
            matrix_from_rows(&self.r, "R")?,
            DVector::from_vec(self.z),
        )?;
        LinearGaussianModel::new(prior, meas)
    }
}

/// Gradients and Hessians of the log-homotopy at one `(x, λ)`.
///
/// Under the linear-Gaussian model the Hessians do not depend on `x`.
#[derive(Debug, Clone)]
pub struct HomotopyDerivatives {
    pub lambda: f64,
    pub grad_log_g: DVector<f64>,
    pub grad_log_h: DVector<f64>,
    pub hess_log_g: DMatrix<f64>,
    pub hess_log_h: DMatrix<f64>,
    /// `hess_log_g + λ·hess_log_h`
    pub hess_log_p: DMatrix<f64>,
    /// `M(λ) = −hess_log_p`
    pub m: DMatrix<f64>,
    /// `S = −hess_log_g`
    pub s: DMatrix<f64>,
    m_chol: Cholesky<f64, Dyn>,
}

impl HomotopyDerivatives {
    pub fn grad_log_p(&self) -> DVector<f64> {
        &self.grad_log_g + &self.grad_log_h * self.lambda
    }

    /// `M⁻¹ B` by Cholesky solve.
    pub fn solve_m(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.m_chol.solve(b)
    }

    pub fn solve_m_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.m_chol.solve(b)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(FlowError::LambdaRange(lambda))
    }
}

/// `∇ log g(x) = −P_g⁻¹(x − x_prior)`.
pub fn grad_log_prior(x: &DVector<f64>, prior: &GaussianPrior) -> Result<DVector<f64>> {
    ensure_dim("x", prior.dim(), x.len())?;
    Ok(-prior.solve(&(x - prior.mean())))
}

/// `∇ log h(x) = HᵀR⁻¹(z − Hx)`.
pub fn grad_log_likelihood(x: &DVector<f64>, meas: &LinearMeasurement) -> Result<DVector<f64>> {
    ensure_dim("x", meas.state_dim(), x.len())?;
    Ok(meas.information_z() - meas.information() * x)
}

pub fn homotopy_derivatives(
    x: &DVector<f64>,
    lambda: f64,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<HomotopyDerivatives> {
    check_lambda(lambda)?;
    ensure_dim("H cols", prior.dim(), meas.state_dim())?;
    let grad_log_g = grad_log_prior(x, prior)?;
    let grad_log_h = grad_log_likelihood(x, meas)?;
    let s = prior.precision().clone();
    let hess_log_g = -&s;
    let hess_log_h = -meas.information();
    let hess_log_p = &hess_log_g + &hess_log_h * lambda;
    let m = -&hess_log_p;
    let m_chol = cholesky(&m, "M(lambda)")?;
    Ok(HomotopyDerivatives { lambda, grad_log_g, grad_log_h, hess_log_g, hess_log_h, hess_log_p, m, s, m_chol })
}

/// `log g(x) + λ log h(x)`, omitting `log c(λ)` and Gaussian normalizers.
pub fn log_homotopy_density_unnormalized(
    x: &DVector<f64>,
    lambda: f64,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(prior.log_density_unnormalized(x)? + lambda * meas.log_likelihood_unnormalized(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{canonical, random_instance};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn grad_prior_examples() {
        let (prior, _) = canonical();
        assert_eq!(grad_log_prior(&v(&[0.0]), &prior).unwrap(), v(&[0.0]));
        assert_relative_eq!(grad_log_prior(&v(&[2.0]), &prior).unwrap()[0], -2.0);

        let prior2 = GaussianPrior::new(v(&[0.0, 0.0]), DMatrix::from_diagonal(&v(&[1.0, 4.0]))).unwrap();
        let g = grad_log_prior(&v(&[1.0, 2.0]), &prior2).unwrap();
        assert_relative_eq!(g, v(&[-1.0, -0.5]), epsilon = 1e-15);
    }

    #[test]
    fn grad_prior_dimension_error() {
        let (prior, _) = canonical();
        assert!(matches!(
            grad_log_prior(&v(&[0.0, 1.0]), &prior),
            Err(FlowError::Dimension { expected: 1, found: 2, .. })
        ));
    }

    #[test]
    fn grad_likelihood_examples() {
        let (_, meas) = canonical();
        assert_relative_eq!(grad_log_likelihood(&v(&[2.0]), &meas).unwrap()[0], 0.0);
        assert_relative_eq!(grad_log_likelihood(&v(&[0.0]), &meas).unwrap()[0], 2.0);

        let blind = LinearMeasurement::new(DMatrix::zeros(2, 3), DMatrix::identity(2, 2), v(&[5.0, -1.0])).unwrap();
        assert_eq!(grad_log_likelihood(&v(&[1.0, 2.0, 3.0]), &blind).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn derivative_examples() {
        let (prior, meas) = canonical();
        let d0 = homotopy_derivatives(&v(&[0.7]), 0.0, &prior, &meas).unwrap();
        assert_eq!(d0.grad_log_p(), grad_log_prior(&v(&[0.7]), &prior).unwrap());

        let d1 = homotopy_derivatives(&v(&[1.0]), 1.0, &prior, &meas).unwrap();
        assert_relative_eq!(d1.grad_log_p()[0], 0.0);

        for &lam in &[0.0, 0.3, 1.0] {
            let d = homotopy_derivatives(&v(&[-3.0]), lam, &prior, &meas).unwrap();
            assert_relative_eq!(d.m[(0, 0)], 1.0 + lam);
            assert_relative_eq!(d.s[(0, 0)], 1.0);
        }
    }

    #[test]
    fn lambda_out_of_range() {
        let (prior, meas) = canonical();
        assert!(matches!(homotopy_derivatives(&v(&[0.0]), 1.5, &prior, &meas), Err(FlowError::LambdaRange(_))));
        assert!(log_homotopy_density_unnormalized(&v(&[0.0]), -0.1, &prior, &meas).is_err());
    }

    #[test]
    fn log_density_difference() {
        let (prior, meas) = canonical();
        let a = log_homotopy_density_unnormalized(&v(&[1.0]), 1.0, &prior, &meas).unwrap();
        let b = log_homotopy_density_unnormalized(&v(&[0.0]), 1.0, &prior, &meas).unwrap();
        assert_relative_eq!(a - b, 1.0, epsilon = 1e-14);
        // λ = 0 reduces to the prior
        let g = log_homotopy_density_unnormalized(&v(&[2.0]), 0.0, &prior, &meas).unwrap();
        assert_relative_eq!(g, prior.log_density_unnormalized(&v(&[2.0])).unwrap());
    }

    #[test]
    fn posterior_log_ratio_matches_exact_posterior() {
        // posterior N(1, 0.5): log p(x1) − log p(x2) = −(x1−1)² + (x2−1)²
        let (prior, meas) = canonical();
        for &(x1, x2) in &[(0.3, 2.0), (-1.0, 1.5)] {
            let lhs = log_homotopy_density_unnormalized(&v(&[x1]), 1.0, &prior, &meas).unwrap()
                - log_homotopy_density_unnormalized(&v(&[x2]), 1.0, &prior, &meas).unwrap();
            let rhs = -(x1 - 1.0_f64).powi(2) + (x2 - 1.0_f64).powi(2);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_inputs_are_symmetrized() {
        let mut cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        cov[(0, 1)] += 1e-13;
        let prior = GaussianPrior::new(v(&[0.0, 0.0]), cov).unwrap();
        assert_eq!(prior.cov(), &prior.cov().transpose());
    }

    #[test]
    fn not_positive_definite_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(GaussianPrior::new(v(&[0.0, 0.0]), cov), Err(FlowError::NotPositiveDefinite("P_g"))));
        let bad_r = LinearMeasurement::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), v(&[0.0]));
        assert!(matches!(bad_r, Err(FlowError::NotPositiveDefinite("R"))));
        let nan_h = LinearMeasurement::new(DMatrix::from_element(1, 1, f64::NAN), DMatrix::identity(1, 1), v(&[0.0]));
        assert!(matches!(nan_h, Err(FlowError::NonFinite("H"))));
    }

    #[test]
    fn model_file_round_trip_and_ragged_rejection() {
        let text = r#"{"x_prior":[0.0],"P_g":[[1.0]],"H":[[1.0]],"R":[[1.0]],"z":[2.0]}"#;
        let model = LinearGaussianModel::from_json_str(text).unwrap();
        assert_eq!(model.dim(), 1);
        let again = serde_json::to_string(&model.to_file()).unwrap();
        assert_eq!(LinearGaussianModel::from_json_str(&again).unwrap().to_file(), model.to_file());

        let ragged = r#"{"x_prior":[0,0],"P_g":[[1,0],[0]],"H":[[1,0]],"R":[[1]],"z":[2]}"#;
        assert!(matches!(LinearGaussianModel::from_json_str(ragged), Err(FlowError::Parse(_))));
        let unknown = r#"{"x_prior":[0],"P_g":[[1]],"H":[[1]],"R":[[1]],"z":[2],"Q":1}"#;
        assert!(LinearGaussianModel::from_json_str(unknown).is_err());
        let mismatch = r#"{"x_prior":[0,0],"P_g":[[1,0],[0,1]],"H":[[1]],"R":[[1]],"z":[2]}"#;
        assert!(matches!(LinearGaussianModel::from_json_str(mismatch), Err(FlowError::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn m_is_prior_plus_scaled_information(seed in any::<u64>(), n in 1usize..5, d in 1usize..3, lam in 0.0f64..=1.0) {
            let model = random_instance(seed, n, d);
            let x = DVector::from_element(n, 0.3);
            let der = homotopy_derivatives(&x, lam, &model.prior, &model.meas).unwrap();
            let expected = &der.s + model.meas.information() * lam;
            prop_assert!((&der.m - &expected).norm() <= 1e-12 * expected.norm());
            prop_assert_eq!(&der.hess_log_p, &(&der.hess_log_g + &der.hess_log_h * lam));
            prop_assert!(crate::linalg::min_sym_eigenvalue(&der.m) > 0.0);
            prop_assert!(crate::linalg::is_psd(&(&der.m - &der.s), 1e-10));
        }

        #[test]
        fn gradients_are_affine(seed in any::<u64>(), n in 1usize..5, alpha in 0.0f64..1.0) {
            let model = random_instance(seed, n, 2);
            let x1 = DVector::from_fn(n, |i, _| i as f64 - 1.3);
            let x2 = DVector::from_fn(n, |i, _| 0.7 * i as f64 + 2.0);
            let mix = &x1 * alpha + &x2 * (1.0 - alpha);
            for grad in [
                |x: &DVector<f64>, m: &LinearGaussianModel| grad_log_prior(x, &m.prior).unwrap(),
                |x: &DVector<f64>, m: &LinearGaussianModel| grad_log_likelihood(x, &m.meas).unwrap(),
            ] {
                let lhs = grad(&mix, &model);
                let rhs = grad(&x1, &model) * alpha + grad(&x2, &model) * (1.0 - alpha);
                prop_assert!((&lhs - &rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
            }
        }

        #[test]
        fn gradient_matches_finite_difference(seed in any::<u64>(), n in 1usize..4, lam in 0.0f64..=1.0) {
            let model = random_instance(seed, n, 2);
            let x = DVector::from_fn(n, |i, _| 0.5 - 0.4 * i as f64);
            let der = homotopy_derivatives(&x, lam, &model.prior, &model.meas).unwrap();
            let analytic = der.grad_log_p();
            let step = 1e-5;
            let fd = DVector::from_fn(n, |i, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let fp = log_homotopy_density_unnormalized(&xp, lam, &model.prior, &model.meas).unwrap();
                let fm = log_homotopy_density_unnormalized(&xm, lam, &model.prior, &model.meas).unwrap();
                (fp - fm) / (2.0 * step)
            });
            prop_assert!((&fd - &analytic).norm() <= 1e-6 * analytic.norm().max(1.0));
        }
    }
}
