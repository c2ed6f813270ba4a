//! Particle flows for linear-Gaussian Bayesian updates.
//!
//! The log-homotopy `p(x, λ) ∝ g(x) h(x)^λ` moves a prior `g` into the
//! posterior as `λ` runs from 0 to 1. Particles follow the SDE
//! `dx = f(x, λ) dλ + q dw` whose drift and diffusion are indexed by a free
//! matrix `K`; every admissible `K` gives the same law at every `λ`.
//!
//! Modules, roughly in dependency order:
//!
//! - [`model`]: Gaussian prior, linear measurement, homotopy derivatives
//! - [`flow`]: the `K`-indexed flow family, presets, `K ↔ Q`
//! - [`sde`]: λ-grids and the Euler–Maruyama / RK4 integrators
//! - [`moments`]: mean/covariance ODEs and the closed-form posterior path
//! - [`ensemble`]: ensembles, estimators, consistency sweeps
//! - [`stability`]: error system, Lyapunov functions, stability checkers
//! - [`sequential`]: multi-step filtering against a Kalman filter
//! - [`verify`]: built-in acceptance checks

pub mod ensemble;
pub mod error;
pub mod flow;
pub mod instances;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod rng;
pub mod sde;
pub mod sequential;
pub mod stability;
pub mod verify;

pub use ensemble::{
    consistency_sweep, covariance_estimate, mean_estimate, sample_prior, ConsistencyRow, ConsistencyTable,
    EstimatorReport, ParticleEnsemble,
};
pub use error::{FlowError, Result};
pub use flow::{
    affine_coefficients, drift, exact_flow_coefficients, flow_condition_rhs, is_admissible, k_from_q, preset,
    preset_catalog, q_from_k, AffineFlowCoefficients, FlowDescriptor, FlowKind, FlowParameterization, Preset,
};
pub use model::{
    homotopy_derivatives, GaussianPrior, HomotopyDerivatives, LinearGaussianModel, LinearMeasurement, ModelFile,
};
pub use moments::{closed_form_posterior, lmv_estimate, solve_moment_odes, MomentPath};
pub use rng::NoiseStream;
pub use sde::{propagate_ensemble, propagate_particle, FlowSchedule, LambdaGrid, Scheme};
pub use sequential::{run_sequential, SequentialRow, SequentialScenario, SequentialTable};
pub use stability::{
    check_ftcs, check_fts, check_ftss, classify_regime, contraction_rate, ellipsoid_invariance_check, error_trajectory,
    lyapunov_derivative, stability_report, ErrorTrajectory, Regime, StabilityConfig, StabilityReport,
};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
