//! Particle propagation along `dx = (A(λ)x + b(λ)) dλ + q(λ) dw_λ` on `[0, 1]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{FlowError, Result};
use crate::flow::{affine_coefficients, diffusion_factor, AffineFlowCoefficients, FlowParameterization};
use crate::model::{GaussianPrior, LinearMeasurement};
use crate::rng::{derive_seed, purpose, NoiseStream};

/// Particles whose norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;
pub const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    #[serde(rename = "rk4")]
    DeterministicRk4,
}

/// Discretization of `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    nodes: Vec<f64>,
    scheme: Scheme,
}

impl LambdaGrid {
    pub fn uniform(steps: usize, scheme: Scheme) -> Result<Self> {
        if steps == 0 {
            return Err(FlowError::Grid("steps must be positive".into()));
        }
        let mut nodes: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        nodes[steps] = 1.0;
        Ok(Self { nodes, scheme })
    }

    pub fn from_nodes(nodes: Vec<f64>, scheme: Scheme) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 || *nodes.last().unwrap() != 1.0 {
            return Err(FlowError::Grid("nodes must start at 0 and end at 1".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0] || !w[1].is_finite()) {
            return Err(FlowError::Grid("nodes must be strictly increasing".into()));
        }
        Ok(Self { nodes, scheme })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        Self { nodes: self.nodes.clone(), scheme }
    }

    /// Inserts every interval midpoint (twice the steps).
    pub fn refined(&self) -> Self {
        let mut nodes = Vec::with_capacity(2 * self.nodes.len() - 1);
        for w in self.nodes.windows(2) {
            nodes.push(w[0]);
            nodes.push(0.5 * (w[0] + w[1]));
        }
        nodes.push(1.0);
        Self { nodes, scheme: self.scheme }
    }

    pub fn midpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.windows(2).map(|w| 0.5 * (w[0] + w[1]))
    }
}

/// Flow coefficients precomputed on a grid (and at interval midpoints, which
/// RK4 needs). Particle-independent, so one table serves a whole ensemble.
#[derive(Debug, Clone)]
pub struct FlowSchedule {
    grid: LambdaGrid,
    at_nodes: Vec<AffineFlowCoefficients>,
    at_midpoints: Vec<AffineFlowCoefficients>,
    factors: Vec<DMatrix<f64>>,
    deterministic: bool,
}

impl FlowSchedule {
    pub fn new(
        params: &FlowParameterization,
        grid: &LambdaGrid,
        prior: &GaussianPrior,
        meas: &LinearMeasurement,
    ) -> Result<Self> {
        let at_nodes =
            grid.nodes().iter().map(|&l| affine_coefficients(l, params, prior, meas)).collect::<Result<Vec<_>>>()?;
        let at_midpoints =
            grid.midpoints().map(|l| affine_coefficients(l, params, prior, meas)).collect::<Result<Vec<_>>>()?;
        let factors = at_nodes
            .iter()
            .map(|c| {
                diffusion_factor(&c.q).map_err(|e| match e {
                    FlowError::Inadmissible { min_eigenvalue, .. } => {
                        FlowError::Inadmissible { lambda: Some(c.lambda), min_eigenvalue }
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tol = zero_diffusion_tol(prior);
        let deterministic = at_nodes.iter().chain(&at_midpoints).all(|c| c.q.norm() <= tol);
        if grid.scheme() == Scheme::DeterministicRk4 && !deterministic {
            return Err(FlowError::Grid("RK4 requires a flow with Q = 0 on the whole grid".into()));
        }
        Ok(Self { grid: grid.clone(), at_nodes, at_midpoints, factors, deterministic })
    }

    pub fn grid(&self) -> &LambdaGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.at_nodes[0].a.nrows()
    }

    pub fn at_nodes(&self) -> &[AffineFlowCoefficients] {
        &self.at_nodes
    }

    pub fn at_midpoints(&self) -> &[AffineFlowCoefficients] {
        &self.at_midpoints
    }

    /// True when `Q(λ)` vanishes at every node and midpoint.
    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// Integrates one particle to `λ = 1`, optionally recording each node.
    pub fn integrate(
        &self,
        x0: &DVector<f64>,
        noise: &mut NoiseStream,
        mut record: Option<&mut Vec<(f64, DVector<f64>)>>,
    ) -> Result<DVector<f64>> {
        let n = self.dim();
        if x0.len() != n {
            return Err(FlowError::Dimension { what: "x0", expected: n, found: x0.len() });
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite("x0"));
        }
        let nodes = self.grid.nodes();
        let mut x = x0.clone();
        let mut work = Workspace::new(n);
        if let Some(path) = record.as_deref_mut() {
            path.push((nodes[0], x.clone()));
        }
        for k in 0..self.grid.steps() {
            let dl = nodes[k + 1] - nodes[k];
            match self.grid.scheme() {
                Scheme::EulerMaruyama => self.euler_maruyama_step(k, dl, &mut x, noise, &mut work),
                Scheme::DeterministicRk4 => self.rk4_step(k, dl, &mut x, &mut work),
            }
            if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
                return Err(FlowError::Divergence { step: k + 1, lambda: nodes[k + 1], particle: None });
            }
            if let Some(path) = record.as_deref_mut() {
                path.push((nodes[k + 1], x.clone()));
            }
        }
        Ok(x)
    }

    fn euler_maruyama_step(
        &self,
        k: usize,
        dl: f64,
        x: &mut DVector<f64>,
        noise: &mut NoiseStream,
        work: &mut Workspace,
    ) {
        let c = &self.at_nodes[k];
        work.k1.copy_from(&c.b);
        work.k1.gemv(1.0, &c.a, x, 1.0);
        x.axpy(dl, &work.k1, 1.0);
        let q = &self.factors[k];
        if q.ncols() > 0 {
            // n normals per step regardless of rank keeps stream addressing fixed
            noise.normals_at(k as u64, work.xi.as_mut_slice());
            let m = q.ncols();
            x.gemv(dl.sqrt(), q, &work.xi.rows(0, m), 1.0);
        }
    }

    fn rk4_step(&self, k: usize, dl: f64, x: &mut DVector<f64>, work: &mut Workspace) {
        let (c0, cm, c1) = (&self.at_nodes[k], &self.at_midpoints[k], &self.at_nodes[k + 1]);
        let Workspace { k1, k2, k3, k4, tmp, .. } = work;
        eval(c0, x, k1);
        tmp.copy_from(x);
        tmp.axpy(0.5 * dl, k1, 1.0);
        eval(cm, tmp, k2);
        tmp.copy_from(x);
        tmp.axpy(0.5 * dl, k2, 1.0);
        eval(cm, tmp, k3);
        tmp.copy_from(x);
        tmp.axpy(dl, k3, 1.0);
        eval(c1, tmp, k4);
        x.axpy(dl / 6.0, k1, 1.0);
        x.axpy(dl / 3.0, k2, 1.0);
        x.axpy(dl / 3.0, k3, 1.0);
        x.axpy(dl / 6.0, k4, 1.0);
    }
}

fn eval(c: &AffineFlowCoefficients, x: &DVector<f64>, out: &mut DVector<f64>) {
    out.copy_from(&c.b);
    out.gemv(1.0, &c.a, x, 1.0);
}

struct Workspace {
    k1: DVector<f64>,
    k2: DVector<f64>,
    k3: DVector<f64>,
    k4: DVector<f64>,
    tmp: DVector<f64>,
    xi: DVector<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let z = DVector::zeros(n);
        Self { k1: z.clone(), k2: z.clone(), k3: z.clone(), k4: z.clone(), tmp: z.clone(), xi: z }
    }
}

/// Absolute threshold below which `‖Q‖_F` counts as zero.
pub fn zero_diffusion_tol(prior: &GaussianPrior) -> f64 {
    1e-12 * prior.cov().norm()
}

/// Propagates a single particle and returns the `(λ, x)` path.
pub fn propagate_particle(
    x0: &DVector<f64>,
    params: &FlowParameterization,
    grid: &LambdaGrid,
    noise: &mut NoiseStream,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<Vec<(f64, DVector<f64>)>> {
    let schedule = FlowSchedule::new(params, grid, prior, meas)?;
    let mut path = Vec::with_capacity(grid.steps() + 1);
    schedule.integrate(x0, noise, Some(&mut path))?;
    Ok(path)
}

/// Seed of the flow-noise streams for an ensemble seed.
pub fn flow_noise_seed(ensemble_seed: u64) -> u64 {
    derive_seed(ensemble_seed, purpose::FLOW, 0)
}

/// Moves every particle from `λ = 0` to `λ = 1`. Particle `id` uses noise
/// stream `id`, so the result does not depend on ordering or thread count.
pub fn propagate_ensemble(
    ensemble: &ParticleEnsemble,
    params: &FlowParameterization,
    grid: &LambdaGrid,
    prior: &GaussianPrior,
    meas: &LinearMeasurement,
) -> Result<ParticleEnsemble> {
    let schedule = FlowSchedule::new(params, grid, prior, meas)?;
    propagate_ensemble_with(&schedule, ensemble, flow_noise_seed(ensemble.seed()))
}

pub fn propagate_ensemble_with(
    schedule: &FlowSchedule,
    ensemble: &ParticleEnsemble,
    noise_seed: u64,
) -> Result<ParticleEnsemble> {
    if ensemble.lambda() != 0.0 {
        return Err(FlowError::Parameter(format!("ensemble must start at lambda = 0, found {}", ensemble.lambda())));
    }
    let results: Vec<Result<DVector<f64>>> = ensemble
        .particles()
        .par_iter()
        .zip(ensemble.ids().par_iter())
        .enumerate()
        .map(|(index, (x0, &id))| {
            let mut noise = NoiseStream::new(noise_seed, id);
            schedule.integrate(x0, &mut noise, None).map_err(|e| e.with_particle(index))
        })
        .collect();
    let particles = results.into_iter().collect::<Result<Vec<_>>>()?;
    ParticleEnsemble::from_parts(particles, ensemble.ids().to_vec(), 1.0, ensemble.seed())
}
