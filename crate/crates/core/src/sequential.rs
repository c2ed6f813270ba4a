//! Multi-step filtering: `x_k = F x_{k−1} + w_k`, `z_k = H x_k + v_k`.
//!
//! Between measurements the ensemble is pushed through the dynamics, a
//! Gaussian prior is refit from it by moment matching, and the flow performs
//! the update. A Kalman filter on the same measurements is the oracle.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ensemble::{covariance_estimate, mean_estimate, sample_prior, ParticleEnsemble};
use crate::error::{FlowError, Result};
use crate::flow::{FlowDescriptor, FACTOR_REL_TOL};
use crate::linalg::{ensure_dim, ensure_finite_matrix, matrix_from_rows, symmetrize};
use crate::model::{GaussianPrior, LinearGaussianModel, LinearMeasurement};
use crate::moments::closed_form_posterior;
use crate::rng::{derive_seed, purpose, NoiseStream};
use crate::sde::{propagate_ensemble_with, FlowSchedule, LambdaGrid};

/// Dynamics and truth seed. The initial prior and the measurement model
/// `(H, R)` come from the accompanying [`LinearGaussianModel`]; its `z` is
/// ignored because measurements are simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequentialScenario {
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "K_steps")]
    pub k_steps: usize,
    pub truth_seed: u64,
}

impl SequentialScenario {
    /// Constant-velocity model with unit sample time.
    pub fn constant_velocity(q: f64, k_steps: usize, truth_seed: u64) -> Self {
        Self {
            f: vec![vec![1.0, 1.0], vec![0.0, 1.0]],
            w: vec![vec![q / 3.0, q / 2.0], vec![q / 2.0, q]],
            k_steps,
            truth_seed,
        }
    }

    fn matrices(&self, n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let f = matrix_from_rows(&self.f, "F")?;
        let w = matrix_from_rows(&self.w, "W")?;
        for (what, m) in [("F", &f), ("W", &w)] {
            ensure_dim(what, n, m.nrows())?;
            ensure_dim(what, n, m.ncols())?;
            ensure_finite_matrix(m, what)?;
        }
        if (&w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0) {
            return Err(FlowError::Parameter("W must be symmetric".into()));
        }
        if self.k_steps == 0 {
            return Err(FlowError::Parameter("K_steps must be at least 1".into()));
        }
        Ok((f, psd_sqrt(&w, "W")?))
    }
}

/// Square factor `L` with `L Lᵀ = A` for symmetric PSD `A` (may be singular).
fn psd_sqrt(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let norm = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -FACTOR_REL_TOL * norm {
        return Err(FlowError::Parameter(format!("{what} is not positive semidefinite (min eigenvalue {min:e})")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequentialRow {
    pub step: usize,
    pub rmse_flow: f64,
    pub rmse_kalman: f64,
    pub cov_frobenius_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialTable {
    pub rows: Vec<SequentialRow>,
    /// Posterior ensemble mean after the last step.
    pub final_flow_mean: Vec<f64>,
    pub final_kalman_mean: Vec<f64>,
    pub final_truth: Vec<f64>,
}

impl SequentialTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,rmse_flow,rmse_kalman,cov_frobenius_gap\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.rmse_flow, r.rmse_kalman, r.cov_frobenius_gap));
        }
        out
    }

    /// `Σ rmse_flow / Σ rmse_kalman` over all steps.
    pub fn rmse_ratio(&self) -> f64 {
        let flow: f64 = self.rows.iter().map(|r| r.rmse_flow).sum();
        let kalman: f64 = self.rows.iter().map(|r| r.rmse_kalman).sum();
        flow / kalman
    }
}

/// Pooled `Σ rmse_flow / Σ rmse_kalman` across several runs.
pub fn pooled_rmse_ratio(tables: &[SequentialTable]) -> f64 {
    let flow: f64 = tables.iter().flat_map(|t| &t.rows).map(|r| r.rmse_flow).sum();
    let kalman: f64 = tables.iter().flat_map(|t| &t.rows).map(|r| r.rmse_kalman).sum();
    flow / kalman
}

fn rmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    (estimate - truth).norm() / (truth.len() as f64).sqrt()
}

fn draw(key: u64, step: u64, factor: &DMatrix<f64>) -> DVector<f64> {
    let mut xi = DVector::zeros(factor.ncols());
    NoiseStream::new(key, 0).normals_at(step, xi.as_mut_slice());
    factor * xi
}

/// Runs the scenario. Truth and measurements depend only on
/// `truth_seed`; everything on the filter side only on `ensemble_seed`.
pub fn run_sequential(
    scenario: &SequentialScenario,
    model: &LinearGaussianModel,
    flow: &FlowDescriptor,
    grid: &LambdaGrid,
    particles: usize,
    ensemble_seed: u64,
) -> Result<SequentialTable> {
    let n = model.dim();
    let (f, w_sqrt) = scenario.matrices(n)?;
    let r_sqrt = psd_sqrt(model.meas.r(), "R")?;
    let h = model.meas.h().clone();
    if particles <= n {
        return Err(FlowError::InsufficientSamples { needed: n + 1, got: particles });
    }

    let truth_key = derive_seed(scenario.truth_seed, purpose::TRUTH, 0);
    let meas_key = derive_seed(scenario.truth_seed, purpose::MEASUREMENT, 0);
    let mut truth = model.prior.mean() + draw(truth_key, 0, &model.prior.cov_factor());

    let mut kalman = (model.prior.mean().clone(), model.prior.cov().clone());
    let mut ensemble = sample_prior(particles, &model.prior, ensemble_seed)?;
    let ids = ensemble.ids().to_vec();
    let mut rows = Vec::with_capacity(scenario.k_steps);
    let mut flow_mean = model.prior.mean().clone();

    for step in 1..=scenario.k_steps {
        let at = |e: FlowError| FlowError::AtStep { step, source: Box::new(e) };
        truth = &f * &truth + draw(truth_key, step as u64, &w_sqrt);
        let z = &h * &truth + draw(meas_key, step as u64, &r_sqrt);
        let meas = LinearMeasurement::new(h.clone(), model.meas.r().clone(), z).map_err(at)?;

        // Kalman oracle: predict, then the exact Gaussian update.
        let predicted =
            GaussianPrior::new(&f * &kalman.0, &f * &kalman.1 * f.transpose() + &w_sqrt * w_sqrt.transpose())
                .map_err(at)?;
        kalman = closed_form_posterior(1.0, &predicted, &meas).map_err(at)?;

        // Ensemble: dynamics, Gaussian refit, flow update.
        let process_key = derive_seed(ensemble_seed, purpose::PROCESS, step as u64);
        let moved: Vec<DVector<f64>> = ensemble
            .particles()
            .iter()
            .zip(&ids)
            .map(|(x, &id)| {
                let mut xi = DVector::zeros(n);
                NoiseStream::new(process_key, id).normals_at(0, xi.as_mut_slice());
                &f * x + &w_sqrt * xi
            })
            .collect();
        let moved = ParticleEnsemble::from_parts(moved, ids.clone(), 0.0, ensemble_seed).map_err(at)?;
        let refit = GaussianPrior::new(mean_estimate(&moved), covariance_estimate(&moved).map_err(at)?).map_err(at)?;
        let params = flow.build(&refit, &meas).map_err(at)?;
        let schedule = FlowSchedule::new(&params, grid, &refit, &meas).map_err(at)?;
        let updated =
            propagate_ensemble_with(&schedule, &moved, derive_seed(ensemble_seed, purpose::FLOW, step as u64))
                .map_err(at)?;

        flow_mean = mean_estimate(&updated);
        let flow_cov = covariance_estimate(&updated).map_err(at)?;
        rows.push(SequentialRow {
            step,
            rmse_flow: rmse(&flow_mean, &truth),
            rmse_kalman: rmse(&kalman.0, &truth),
            cov_frobenius_gap: (flow_cov - &kalman.1).norm(),
        });
        ensemble =
            ParticleEnsemble::from_parts(updated.particles().to_vec(), ids.clone(), 0.0, ensemble_seed).map_err(at)?;
    }

    Ok(SequentialTable {
        rows,
        final_flow_mean: flow_mean.iter().copied().collect(),
        final_kalman_mean: kalman.0.iter().copied().collect(),
        final_truth: truth.iter().copied().collect(),
    })
}

/// Constant-velocity model: position measured with variance `r`, initial
/// prior `N(0, diag(p0, p0))`.
pub fn constant_velocity_model(r: f64, p0: f64) -> Result<LinearGaussianModel> {
    LinearGaussianModel::new(
        GaussianPrior::new(DVector::zeros(2), DMatrix::identity(2, 2) * p0)?,
        LinearMeasurement::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, r),
            DVector::zeros(1),
        )?,
    )
}
