//! Mean/covariance ODEs of the linear flow and the closed-form Gaussian
//! posterior path they must reproduce.
//!
//! ```text
//! dx̄/dλ = A x̄ + b,   dP/dλ = A P + P Aᵀ + Q
//! x_μ(λ) = (P_g⁻¹ + λJ)⁻¹ (P_g⁻¹ x_prior + λ HᵀR⁻¹z),   P_p(λ) = (P_g⁻¹ + λJ)⁻¹
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{FlowError, Result};
use crate::flow::{AffineFlowCoefficients, FlowParameterization};
use crate::linalg::{cholesky, symmetrize};
use crate::model::{check_lambda, GaussianPrior, LinearMeasurement};
use crate::sde::{FlowSchedule, LambdaGrid, DIVERGENCE_NORM};

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPath {
    pub nodes: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl MomentPath {
    pub fn terminal(&self) -> (&DVector<f64>, &DMatrix<f64>) {
        (self.means.last().unwrap(), self.covariances.last().unwrap())
    }

    /// CSV `lambda,xbar_0..,P_00,P_01,..` with the row-major upper triangle.
    pub fn to_csv(&self) -> String {
        let n = self.means.first().map_or(0, |m| m.len());
        let mut out = String::from("lambda");
        for i in 0..n {
            out.push_str(&format!(",xbar_{i}"));
        }
        for i in 0..n {
            for j in i..n {
                out.push_str(&format!(",P_{i}{j}"));
            }
        }
        out.push('\n');
        for ((l, m), p) in self.nodes.iter().zip(&self.means).zip(&self.covariances) {
            out.push_str(&l.to_string());
            for v in m.iter() {
                out.push_str(&format!(",{v}"));
            }
            for i in 0..n {
                for j in i..n {
                    out.push_str(&format!(",{}", p[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn moment_rhs(c: &AffineFlowCoefficients, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let ap = &c.a * cov;
    (&c.a * mean + &c.b, &ap + ap.transpose() + &c.q)
}

/// RK4 on the grid nodes, with coefficients at the interval midpoints.
pub fn solve_moment_odes(
    params: &FlowParameterization,
    grid: &LambdaGrid,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<MomentPath> {
    // The scheme tag only matters for particles; moments are always RK4.
    let grid = grid.with_scheme(crate::sde::Scheme::EulerMaruyama);
    let schedule = FlowSchedule::new(params, &grid, prior, meas)?;
    solve_moment_odes_with(&schedule, prior)
}

pub fn solve_moment_odes_with(schedule: &FlowSchedule, prior: &GaussianPrior) -> Result<MomentPath> {
    let nodes = schedule.grid().nodes().to_vec();
    let mut mean = prior.mean().clone();
    let mut cov = prior.cov().clone();
    let mut means = Vec::with_capacity(nodes.len());
    let mut covariances = Vec::with_capacity(nodes.len());
    means.push(mean.clone());
    covariances.push(cov.clone());
    for k in 0..nodes.len() - 1 {
        let h = nodes[k + 1] - nodes[k];
        let (c0, cm, c1) = (&schedule.at_nodes()[k], &schedule.at_midpoints()[k], &schedule.at_nodes()[k + 1]);
        let (dm1, dp1) = moment_rhs(c0, &mean, &cov);
        let (dm2, dp2) = moment_rhs(cm, &(&mean + &dm1 * (0.5 * h)), &(&cov + &dp1 * (0.5 * h)));
        let (dm3, dp3) = moment_rhs(cm, &(&mean + &dm2 * (0.5 * h)), &(&cov + &dp2 * (0.5 * h)));
        let (dm4, dp4) = moment_rhs(c1, &(&mean + &dm3 * h), &(&cov + &dp3 * h));
        mean += (dm1 + dm2 * 2.0 + dm3 * 2.0 + dm4) * (h / 6.0);
        cov += (dp1 + dp2 * 2.0 + dp3 * 2.0 + dp4) * (h / 6.0);
        cov = symmetrize(&cov);
        let finite = mean.iter().chain(cov.iter()).all(|v| v.is_finite());
        if !finite || mean.norm() > DIVERGENCE_NORM || cov.norm() > DIVERGENCE_NORM {
            return Err(FlowError::Divergence { step: k + 1, lambda: nodes[k + 1], particle: None });
        }
        means.push(mean.clone());
        covariances.push(cov.clone());
    }
    Ok(MomentPath { nodes, means, covariances })
}

/// `(x_μ(λ), P_p(λ))` in information form via Cholesky solves.
pub fn closed_form_posterior(
    lambda: f64,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_lambda(lambda)?;
    crate::linalg::ensure_dim("H cols", prior.dim(), meas.state_dim())?;
    if lambda == 0.0 {
        return Ok((prior.mean().clone(), prior.cov().clone()));
    }
    let info = symmetrize(&(prior.precision() + meas.information() * lambda));
    let chol = cholesky(&info, "P_g^-1 + lambda H^T R^-1 H")?;
    let rhs = prior.solve(prior.mean()) + meas.information_z() * lambda;
    Ok((chol.solve(&rhs), symmetrize(&chol.inverse())))
}

/// `P_g − λ P_g Hᵀ (R + λ H P_g Hᵀ)⁻¹ H P_g`, the covariance-form counterpart
/// of [`closed_form_posterior`].
pub fn posterior_covariance_gain_form(
    lambda: f64,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<DMatrix<f64>> {
    check_lambda(lambda)?;
    let p = prior.cov();
    let h = meas.h();
    let hp = h * p;
    let s = symmetrize(&(meas.r() + &hp * h.transpose() * lambda));
    let chol = cholesky(&s, "R + lambda H P_g H^T")?;
    Ok(symmetrize(&(p - hp.transpose() * chol.solve(&hp) * lambda)))
}

/// `x̂* = μ_x + R_xz R_zz⁻¹ (z − μ_z)` with `μ_z = H x_prior`,
/// `R_xz = P_g Hᵀ`, `R_zz = H P_g Hᵀ + R`.
pub fn lmv_estimate(prior: &GaussianPrior, meas: &LinearMeasurement) -> Result<DVector<f64>> {
    crate::linalg::ensure_dim("H cols", prior.dim(), meas.state_dim())?;
    let h = meas.h();
    let r_xz = prior.cov() * h.transpose();
    let r_zz = symmetrize(&(h * &r_xz + meas.r()));
    let innovation = meas.z() - h * prior.mean();
    let chol = cholesky(&r_zz, "H P_g H^T + R")?;
    Ok(prior.mean() + r_xz * chol.solve(&innovation))
}
