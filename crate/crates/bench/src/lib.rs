//! Shared fixtures for the benchmarks.

use flowfilt_core::instances::random_instance;
use flowfilt_core::{LinearGaussianModel, ParticleEnsemble};
use nalgebra::DVector;

/// Random well-conditioned instance of the given size.
pub fn instance(n: usize, d: usize) -> LinearGaussianModel {
    random_instance(0xBE5C, n, d)
}

/// `count` particles at the prior mean.
pub fn ensemble_at_mean(model: &LinearGaussianModel, count: usize) -> ParticleEnsemble {
    let mean: DVector<f64> = model.prior.mean().clone();
    ParticleEnsemble::at_start(vec![mean; count], 1).expect("non-empty ensemble")
}
