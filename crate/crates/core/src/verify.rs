//! Built-in acceptance checks with pinned tolerances and time budgets.
//!
//! Every check is deterministic (fixed instance and noise seeds). A check
//! passes only if its numerical criterion holds *and* it finishes within its
//! budget.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::consistency_sweep;
use crate::error::Result;
use crate::flow::{
    affine_coefficients, affine_from_k, exact_flow_coefficients, flow_condition_rhs, is_admissible, preset,
    FlowDescriptor, FlowParameterization, MatrixSchedule, Preset,
};
use crate::instances::{canonical, random_instance, random_matrix, random_psd, uniform};
use crate::linalg::{rel_diff, rel_diff_vec};
use crate::model::{homotopy_derivatives, GaussianPrior, LinearGaussianModel, LinearMeasurement};
use crate::moments::{closed_form_posterior, solve_moment_odes};
use crate::sde::{LambdaGrid, Scheme};
use crate::sequential::{constant_velocity_model, pooled_rmse_ratio, run_sequential, SequentialScenario};
use crate::stability::{
    check_ftcs, check_fts, check_ftss, contraction_rate, ellipsoid_invariance_check, initial_error_draws,
    lyapunov_derivative, ErrorSystem,
};

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_s: f64,
    pub budget_s: f64,
}

impl CriterionOutcome {
    /// One table line: `PASS  3  name  (12.3 s / 60 s)  detail`.
    pub fn line(&self) -> String {
        format!(
            "{}  {:>2}  {:<40} ({:>6.2} s / {:>3} s)  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed_s,
            self.budget_s,
            self.detail
        )
    }
}

/// Times `check`; errors count as failures.
pub fn timed(
    id: u32,
    name: &'static str,
    budget: Duration,
    check: impl FnOnce() -> Result<(bool, String)>,
) -> CriterionOutcome {
    let start = Instant::now();
    let result = check();
    let elapsed = start.elapsed();
    let (ok, mut detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    let in_time = elapsed <= budget;
    if !in_time {
        detail.push_str("; over time budget");
    }
    CriterionOutcome {
        id,
        name,
        passed: ok && in_time,
        detail,
        elapsed_s: elapsed.as_secs_f64(),
        budget_s: budget.as_secs_f64(),
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn grid(steps: usize, scheme: Scheme) -> LambdaGrid {
    LambdaGrid::uniform(steps, scheme).expect("static grid")
}

/// The 20 moment-oracle instances: `n ∈ {1, 2, 4}`, `d ∈ {1, 2}`.
pub fn oracle_instances() -> Vec<LinearGaussianModel> {
    (0..20u64).map(|i| random_instance(1000 + i, [1, 2, 4][i as usize % 3], [1, 2][(i as usize / 3) % 2])).collect()
}

fn standard_presets(n: usize) -> Vec<(&'static str, Preset)> {
    vec![
        ("exact", Preset::ExactFlow),
        ("fixed_q", Preset::FixedQ),
        ("constant_q", Preset::ConstantQ(DMatrix::identity(n, n))),
        ("diagnostic", Preset::DiagnosticNoise { alpha: 1.0 }),
    ]
}

pub fn moment_oracle() -> CriterionOutcome {
    timed(1, "moment oracle agreement", secs(10), || {
        let (mut worst_mean, mut worst_cov) = (0.0_f64, 0.0_f64);
        let g = grid(1000, Scheme::EulerMaruyama);
        for model in oracle_instances() {
            let (prior, meas) = (&model.prior, &model.meas);
            let (mean, cov) = closed_form_posterior(1.0, prior, meas)?;
            for (_, kind) in standard_presets(prior.dim()) {
                let params = preset(kind, prior, meas)?;
                let path = solve_moment_odes(&params, &g, prior, meas)?;
                let (m1, p1) = path.terminal();
                worst_mean = worst_mean.max(rel_diff_vec(m1, &mean, 1e-12));
                worst_cov = worst_cov.max(rel_diff(p1, &cov, 1e-12));
            }
        }
        Ok((
            worst_mean <= 1e-6 && worst_cov <= 1e-6,
            format!("max rel err mean {worst_mean:.2e}, cov {worst_cov:.2e} (tol 1e-6)"),
        ))
    })
}

/// `K(λ) = ½∇∇ᵀlog h + G(λ)G(λ)ᵀ + sin(cλ)(E − Eᵀ)`, admissible by construction.
pub fn random_k_schedule(seed: u64, n: usize, meas: &LinearMeasurement) -> MatrixSchedule {
    let half_hess_h = -meas.information() * 0.5;
    let g0 = random_matrix(seed, n, n) * 0.5;
    let g1 = random_matrix(seed + 1, n, n) * 0.5;
    let e = random_matrix(seed + 2, n, n);
    let skew = &e - e.transpose();
    let c = uniform(seed + 3, 0.5, 3.0);
    Arc::new(move |lambda| {
        let g = &g0 + &g1 * lambda;
        &half_hess_h + &g * g.transpose() + &skew * (c * lambda).sin()
    })
}

pub fn k_invariance() -> CriterionOutcome {
    timed(2, "law invariant under choice of K", secs(5), || {
        let model = random_instance(77, 3, 2);
        let (prior, meas) = (&model.prior, &model.meas);
        let g = grid(1000, Scheme::EulerMaruyama);
        let paths = (0..5u64)
            .map(|i| {
                let params = FlowParameterization::k_schedule(random_k_schedule(500 + 10 * i, 3, meas), "random K");
                params.validate(prior, meas, 101)?;
                solve_moment_odes(&params, &g, prior, meas)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut worst = 0.0_f64;
        for (i, a) in paths.iter().enumerate() {
            for b in &paths[i + 1..] {
                for k in 0..a.nodes.len() {
                    worst = worst.max(rel_diff_vec(&a.means[k], &b.means[k], 1e-12));
                    worst = worst.max(rel_diff(&a.covariances[k], &b.covariances[k], 1e-12));
                }
            }
        }
        Ok((worst <= 1e-8, format!("max pairwise rel diff {worst:.2e} over 10 pairs x 1001 nodes (tol 1e-8)")))
    })
}

pub fn ensemble_consistency() -> CriterionOutcome {
    timed(3, "ensemble unbiasedness and consistency", secs(60), || {
        let (prior, meas) = canonical();
        let seeds: Vec<u64> = (1..=20).collect();
        let table = consistency_sweep(
            &FlowParameterization::fixed_q(),
            &prior,
            &meas,
            &[100, 1_000, 10_000],
            &seeds,
            &grid(2000, Scheme::EulerMaruyama),
        )?;
        let slope = table.slope.unwrap_or(f64::NAN);
        let last = table.rows.last().expect("three rows");
        let bound = 4.0 * 0.707 / (last.n as f64).sqrt();
        let ok = (slope + 0.5).abs() <= 0.15 && last.max_mean_err <= bound;
        Ok((
            ok,
            format!(
                "slope {slope:.3} (want -0.5 +/- 0.15); worst |mean - 1| at N=1e4 {:.2e} (bound {bound:.2e})",
                last.max_mean_err
            ),
        ))
    })
}

pub fn flow_condition_residual() -> CriterionOutcome {
    timed(4, "flow condition residual", secs(2), || {
        let mut worst = 0.0_f64;
        for i in 0..100u64 {
            let seed = 2000 + 17 * i;
            let n = 1 + (i as usize % 4);
            let d = 1 + (i as usize / 4) % 3;
            let model = random_instance(seed, n, d);
            let (prior, meas) = (&model.prior, &model.meas);
            let lambda = uniform(seed + 1, 0.0, 1.0);
            let k = random_k_schedule(seed + 2, n, meas)(lambda);
            let x = random_matrix(seed + 3, n, 1).column(0) * 2.0 + prior.mean();
            let rhs = flow_condition_rhs(&x, lambda, &k, prior, meas)?;
            let target = homotopy_derivatives(&x, lambda, prior, meas)?.grad_log_h;
            worst = worst.max(rel_diff_vec(&rhs, &target, 1e-12));
        }
        Ok((worst <= 1e-8, format!("max rel residual {worst:.2e} over 100 tuples (tol 1e-8)")))
    })
}

pub fn family_reductions() -> CriterionOutcome {
    timed(5, "family reductions", secs(2), || {
        let (mut exact_err, mut fixed_err, mut ref_err) = (0.0_f64, 0.0_f64, 0.0_f64);
        let mut admissible = true;
        for (j, model) in oracle_instances().iter().take(6).enumerate() {
            let (prior, meas) = (&model.prior, &model.meas);
            let n = prior.dim();
            let alpha = 0.5 + j as f64 * 0.25;
            let diag = preset(Preset::DiagnosticNoise { alpha }, prior, meas)?;
            let q_rand = random_psd(300 + j as u64, n, n);
            let a_src = (prior.clone(), meas.clone());
            let a_hat: MatrixSchedule =
                Arc::new(move |l| exact_flow_coefficients(l, &a_src.0, &a_src.1).map(|c| c.a).expect("valid instance"));
            let q_fn: MatrixSchedule = {
                let q = q_rand.clone();
                Arc::new(move |l| &q * (1.0 + l))
            };
            let approx = preset(Preset::Approximate { a_hat: a_hat.clone(), q: q_fn.clone() }, prior, meas)?;
            for step in 0..=100 {
                let l = step as f64 / 100.0;
                let d = homotopy_derivatives(prior.mean(), l, prior, meas)?;
                let ex = exact_flow_coefficients(l, prior, meas)?;
                let member = affine_from_k(l, &(&d.hess_log_h * 0.5), prior, meas)?;
                exact_err = exact_err.max(rel_diff(&ex.a, &member.a, 1e-12)).max(rel_diff_vec(&ex.b, &member.b, 1e-12));
                let fixed = affine_coefficients(l, &FlowParameterization::fixed_q(), prior, meas)?;
                let zero_k = affine_from_k(l, &DMatrix::zeros(n, n), prior, meas)?;
                fixed_err = fixed_err
                    .max(rel_diff(&fixed.a, &zero_k.a, 1e-12))
                    .max(rel_diff_vec(&fixed.b, &zero_k.b, 1e-12))
                    .max(rel_diff(&fixed.q, &zero_k.q, 1e-12));
                // K = [Hp Q − Âᵀ] Hp, written out here rather than shared
                let hp = -&d.m;
                for (params, a, q) in
                    [(&diag, ex.a.clone(), DMatrix::identity(n, n) * alpha), (&approx, a_hat(l), q_fn(l))]
                {
                    let k = params.k_at(&d)?;
                    let expected = (&hp * &q - a.transpose()) * &hp;
                    ref_err = ref_err.max(rel_diff(&k, &expected, 1e-12));
                    admissible &= is_admissible(&k, &d);
                }
            }
        }
        Ok((
            exact_err <= 1e-9 && fixed_err <= 1e-9 && ref_err <= 1e-10 && admissible,
            format!(
                "exact vs member {exact_err:.2e} (1e-9); fixed_q vs K=0 {fixed_err:.2e} (1e-9); \
                 reference K {ref_err:.2e} (1e-10); admissible {admissible}"
            ),
        ))
    })
}

fn unit_direction(prior: &GaussianPrior, s: &DMatrix<f64>, level: f64, seed: u64) -> DVector<f64> {
    let x = initial_error_draws(prior, s, 1.0, 1, seed).remove(0);
    let v = x.dot(&(s * &x));
    x * (level / v).sqrt()
}

/// Max |central difference of V_M − dV/dλ| on the given grid.
fn lyapunov_fd_error(steps: usize, model: &LinearGaussianModel, params: &FlowParameterization) -> Result<f64> {
    let (prior, meas) = (&model.prior, &model.meas);
    let g = grid(steps, Scheme::EulerMaruyama);
    let s = prior.precision();
    let traj = ErrorSystem::for_flow(params, &g, prior, meas)?.trajectory(&unit_direction(prior, s, 1.0, 9), s)?;
    let h = 1.0 / steps as f64;
    let mut worst = 0.0_f64;
    for k in 1..steps {
        let l = traj.nodes[k];
        let d = homotopy_derivatives(prior.mean(), l, prior, meas)?;
        let q = affine_coefficients(l, params, prior, meas)?.q;
        let fd = (traj.v_m[k + 1] - traj.v_m[k - 1]) / (2.0 * h);
        worst = worst.max((fd - lyapunov_derivative(&traj.errors[k], l, &q, &d)).abs());
    }
    Ok(worst)
}

pub fn lyapunov_suite() -> CriterionOutcome {
    timed(6, "Lyapunov suite", secs(30), || {
        // (a) derivative vs finite differences, second order
        let model = random_instance(61, 3, 2);
        let iso = FlowParameterization::constant_q(DMatrix::identity(3, 3))?;
        let coarse = lyapunov_fd_error(100, &model, &iso)?;
        let fine = lyapunov_fd_error(200, &model, &iso)?;
        let order = (coarse / fine).log2();
        let a_ok = (order - 2.0).abs() < 0.3 && coarse < 1e-2;

        // (b) V_M non-increasing for PSD-Q flows
        let mut b_ok = true;
        let mut worst_rise = 0.0_f64;
        for (i, model) in oracle_instances().iter().take(8).enumerate() {
            let (prior, meas) = (&model.prior, &model.meas);
            let s = prior.precision();
            for (_, kind) in standard_presets(prior.dim()) {
                let params = preset(kind, prior, meas)?;
                let g = grid(1000, Scheme::EulerMaruyama);
                let x0 = unit_direction(prior, s, 1.0, 40 + i as u64);
                let traj = ErrorSystem::for_flow(&params, &g, prior, meas)?.trajectory(&x0, s)?;
                for w in traj.v_m.windows(2) {
                    let rise = (w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE);
                    worst_rise = worst_rise.max(rise);
                    b_ok &= rise <= 1e-10;
                }
            }
        }

        // (c) ellipsoid invariance of the exact flow
        let mut ellipsoid = 0.0_f64;
        let g4 = grid(10_000, Scheme::DeterministicRk4);
        let (cp, cm) = canonical();
        ellipsoid = ellipsoid.max(ellipsoid_invariance_check(&cp, &cm, &g4, 8, 1)?);
        for model in oracle_instances().iter().take(5) {
            ellipsoid = ellipsoid.max(ellipsoid_invariance_check(&model.prior, &model.meas, &g4, 8, 2)?);
        }
        let c_ok = ellipsoid <= 1e-8;

        // (d) Gronwall bound for Q = I
        let mut d_ok = true;
        let mut worst_ratio = 0.0_f64;
        let g = grid(1000, Scheme::EulerMaruyama);
        for (i, model) in oracle_instances().iter().enumerate() {
            let (prior, meas) = (&model.prior, &model.meas);
            let n = prior.dim();
            let params = FlowParameterization::constant_q(DMatrix::identity(n, n))?;
            let sigma = contraction_rate(&params, prior, meas, &g)?;
            let s = prior.precision();
            let traj = ErrorSystem::for_flow(&params, &g, prior, meas)?
                .trajectory(&unit_direction(prior, s, 1.0, i as u64), s)?;
            let ratio = traj.v_s.last().unwrap() / (traj.v_s[0] * (-sigma).exp());
            worst_ratio = worst_ratio.max(ratio);
            d_ok &= ratio <= 1.0 + 1e-6;
        }

        Ok((
            a_ok && b_ok && c_ok && d_ok,
            format!(
                "(a) fd order {order:.2} err {coarse:.1e}; (b) max rel rise {worst_rise:.1e}; \
                 (c) ellipsoid dev {ellipsoid:.1e}; (d) max V_S(1)/bound {worst_ratio:.4}"
            ),
        ))
    })
}

pub fn definition_checkers() -> CriterionOutcome {
    timed(7, "stability definition checkers", secs(60), || {
        let g = grid(1000, Scheme::EulerMaruyama);
        // FTS on admissible flows
        let mut fts_ok = true;
        for (i, model) in oracle_instances().iter().take(10).enumerate() {
            let (prior, meas) = (&model.prior, &model.meas);
            let s = prior.precision();
            for (j, (_, kind)) in standard_presets(prior.dim()).into_iter().enumerate() {
                let params = preset(kind, prior, meas)?;
                let seed = (10 * i + j) as u64;
                let alpha = uniform(seed, 0.1, 5.0);
                let beta = alpha * uniform(seed + 1, 1.01, 3.0);
                let x0 = unit_direction(prior, s, 0.99 * alpha, seed);
                let traj = ErrorSystem::for_flow(&params, &g, prior, meas)?.trajectory(&x0, s)?;
                fts_ok &= check_fts(&traj, alpha, beta, s)?.holds;
            }
        }
        // injected unstable system dx̃ = +x̃ dλ
        let eye = DMatrix::identity(2, 2);
        let unstable = ErrorSystem::from_fns(&g, |_| DMatrix::identity(2, 2), |_| DMatrix::identity(2, 2));
        let x0 = DVector::from_vec(vec![0.7, 0.7]);
        let injected = check_fts(&unstable.trajectory(&x0, &eye)?, 1.0, 2.0, &eye)?;
        let unstable_ok = injected.premise_met && !injected.holds;

        // FTCS under α e^{−σ} < β < α with Q = I
        let mut ftcs_ok = true;
        for (i, model) in oracle_instances().iter().enumerate() {
            let (prior, meas) = (&model.prior, &model.meas);
            let n = prior.dim();
            let s = prior.precision();
            let params = FlowParameterization::constant_q(DMatrix::identity(n, n))?;
            let sigma = contraction_rate(&params, prior, meas, &g)?;
            let alpha = 1.0;
            let beta = 0.5 * (alpha * (-sigma).exp() + alpha);
            let x0 = unit_direction(prior, s, 0.99 * alpha, 100 + i as u64);
            let traj = ErrorSystem::for_flow(&params, &g, prior, meas)?.trajectory(&x0, s)?;
            ftcs_ok &= check_ftcs(&traj, alpha, beta, 2.0 * alpha, s)?.holds;
        }

        // FTSS under α/β ≤ ε with 10⁴ draws
        let mut ftss_ok = true;
        let mut min_margin = f64::INFINITY;
        let (cp, cm) = canonical();
        let cases: Vec<(GaussianPrior, LinearMeasurement)> = std::iter::once((cp, cm))
            .chain(oracle_instances().into_iter().take(4).map(|m| (m.prior, m.meas)))
            .collect();
        for (i, (prior, meas)) in cases.iter().enumerate() {
            let n = prior.dim();
            for params in [FlowParameterization::fixed_q(), FlowParameterization::constant_q(DMatrix::identity(n, n))?]
            {
                let v = check_ftss(&params, prior, meas, prior.precision(), 1.0, 4.0, 0.25, 10_000, 7 + i as u64, &g)?;
                min_margin = min_margin.min(v.empirical_prob - v.threshold);
                ftss_ok &= v.holds;
            }
        }

        Ok((
            fts_ok && unstable_ok && ftcs_ok && ftss_ok,
            format!(
                "fts {fts_ok}; injected unstable rejected {unstable_ok} (max V {:.2}); ftcs {ftcs_ok}; \
                 ftss {ftss_ok} (min margin {min_margin:.3})",
                injected.max_weighted_error
            ),
        ))
    })
}

pub fn sequential_sanity() -> CriterionOutcome {
    timed(8, "sequential filtering vs Kalman", secs(120), || {
        let model = constant_velocity_model(1.0, 1.0)?;
        let g = grid(200, Scheme::EulerMaruyama);
        let tables = (0..10u64)
            .map(|seed| {
                let scenario = SequentialScenario::constant_velocity(0.1, 20, 100 + seed);
                run_sequential(&scenario, &model, &FlowDescriptor::FixedQ, &g, 5000, 200 + seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let ratio = pooled_rmse_ratio(&tables);
        Ok(((0.95..=1.15).contains(&ratio), format!("rmse_flow / rmse_kalman = {ratio:.4} over 10 seeds x 20 steps")))
    })
}

/// Library-level checks (everything except run determinism, which needs
/// the CLI runner).
pub fn run_library_checks() -> Vec<CriterionOutcome> {
    vec![
        moment_oracle(),
        k_invariance(),
        ensemble_consistency(),
        flow_condition_residual(),
        family_reductions(),
        lyapunov_suite(),
        definition_checkers(),
        sequential_sanity(),
    ]
}
