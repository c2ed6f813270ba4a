use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowfilt_bench::{ensemble_at_mean, instance};
use flowfilt_core::sde::{propagate_ensemble_with, FlowSchedule};
use flowfilt_core::{homotopy_derivatives, q_from_k, solve_moment_odes, FlowParameterization, LambdaGrid, Scheme};
use nalgebra::DMatrix;
use std::hint::black_box;

fn ensemble(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagate_ensemble");
    group.sample_size(10);
    for n in [1, 4] {
        let model = instance(n, 1);
        let grid = LambdaGrid::uniform(1000, Scheme::EulerMaruyama).unwrap();
        let schedule = FlowSchedule::new(&FlowParameterization::fixed_q(), &grid, &model.prior, &model.meas).unwrap();
        let ens = ensemble_at_mean(&model, 1000);
        group.bench_with_input(BenchmarkId::new("fixed_q_1000x1000", n), &n, |b, _| {
            b.iter(|| propagate_ensemble_with(&schedule, black_box(&ens), 7).unwrap())
        });
    }
    group.finish();
}

fn moments(c: &mut Criterion) {
    let model = instance(4, 2);
    let grid = LambdaGrid::uniform(1000, Scheme::EulerMaruyama).unwrap();
    let params = FlowParameterization::fixed_q();
    c.bench_function("solve_moment_odes_n4_1000", |b| {
        b.iter(|| solve_moment_odes(&params, black_box(&grid), &model.prior, &model.meas).unwrap())
    });
}

fn k_to_q(c: &mut Criterion) {
    let model = instance(8, 3);
    let d = homotopy_derivatives(model.prior.mean(), 0.5, &model.prior, &model.meas).unwrap();
    let k = DMatrix::<f64>::zeros(8, 8);
    c.bench_function("q_from_k_n8", |b| b.iter(|| q_from_k(black_box(&k), &d).unwrap()));
}

criterion_group!(benches, ensemble, moments, k_to_q);
criterion_main!(benches);
