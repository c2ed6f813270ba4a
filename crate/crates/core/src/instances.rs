//! Reference problem instances used by tests, the verification suite and benches.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{GaussianPrior, LinearGaussianModel, LinearMeasurement};
use crate::rng::box_muller;

/// Scalar case used throughout the docs: `P_g = 1`, `x_prior = 0`,
/// `H = R = 1`, `z = 2`. Posterior is `N(1, 0.5)`.
pub fn canonical() -> (GaussianPrior, LinearMeasurement) {
    let prior = GaussianPrior::new(DVector::from_element(1, 0.0), DMatrix::identity(1, 1)).unwrap();
    let meas = LinearMeasurement::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), DVector::from_element(1, 2.0))
        .unwrap();
    (prior, meas)
}

pub fn canonical_model() -> LinearGaussianModel {
    let (prior, meas) = canonical();
    LinearGaussianModel { prior, meas }
}

/// Well-conditioned random instance with state dimension `n` and
/// measurement dimension `d`.
pub fn random_instance(seed: u64, n: usize, d: usize) -> LinearGaussianModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || {
        let (a, _) = box_muller(rng.random(), rng.random());
        a
    };
    let l = DMatrix::from_fn(n, n, |_, _| 0.6 * normal());
    let p_g = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
    let x_prior = DVector::from_fn(n, |_, _| normal());
    let h = DMatrix::from_fn(d, n, |_, _| normal());
    let b = DMatrix::from_fn(d, d, |_, _| 0.3 * normal());
    let r = &b * b.transpose() + DMatrix::identity(d, d) * 0.5;
    let z = &h * &x_prior + DVector::from_fn(d, |_, _| 1.5 * normal());
    let prior = GaussianPrior::new(x_prior, p_g).unwrap();
    let meas = LinearMeasurement::new(h, r, z).unwrap();
    LinearGaussianModel::new(prior, meas).unwrap()
}

/// Random symmetric PSD matrix of the given rank.
pub fn random_psd(seed: u64, n: usize, rank: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5053_4400);
    let b = DMatrix::from_fn(n, rank, |_, _| box_muller(rng.random(), rng.random()).0);
    &b * b.transpose()
}

/// Random square matrix with standard normal entries.
pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d41_5452);
    DMatrix::from_fn(rows, cols, |_, _| box_muller(rng.random(), rng.random()).0)
}

/// Uniform draw in `[lo, hi)` from a seeded stream, for test parameters.
pub fn uniform(seed: u64, lo: f64, hi: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x554e_4946);
    rng.random_range(lo..hi)
}
