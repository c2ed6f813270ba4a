use flowfilt_core::instances::{canonical_model, random_instance};
use flowfilt_core::{
    closed_form_posterior, mean_estimate, propagate_ensemble, sample_prior, solve_moment_odes, stability_report,
    FlowDescriptor, LambdaGrid, LinearGaussianModel, Regime, Scheme, StabilityConfig,
};

#[test]
fn model_file_round_trip_then_flow_to_posterior() {
    let model = random_instance(3, 2, 1);
    let text = serde_json::to_string(&model.to_file()).unwrap();
    let back = LinearGaussianModel::from_json_str(&text).unwrap();
    assert_eq!(back.prior.mean(), model.prior.mean());

    let params = FlowDescriptor::Exact.build(&back.prior, &back.meas).unwrap();
    let grid = LambdaGrid::uniform(500, Scheme::DeterministicRk4).unwrap();
    let start = sample_prior(4000, &back.prior, 11).unwrap();
    let end = propagate_ensemble(&start, &params, &grid, &back.prior, &back.meas).unwrap();
    let (mean, cov) = closed_form_posterior(1.0, &back.prior, &back.meas).unwrap();
    // MC error of the mean: sqrt(tr P / N)
    let tol = 4.0 * (cov.trace() / 4000.0).sqrt();
    assert!((mean_estimate(&end) - &mean).norm() < tol);
}

#[test]
fn every_descriptor_reaches_the_same_terminal_moments() {
    let model = canonical_model();
    let grid = LambdaGrid::uniform(1000, Scheme::EulerMaruyama).unwrap();
    let descriptors: Vec<FlowDescriptor> = serde_json::from_str(
        r#"[{"flow": "exact"}, {"flow": "fixed_q"}, {"flow": "constant_q", "Q0": [[2.0]]},
            {"flow": "diagnostic", "alpha": 0.3}]"#,
    )
    .unwrap();
    for d in descriptors {
        let params = d.build(&model.prior, &model.meas).unwrap();
        let path = solve_moment_odes(&params, &grid, &model.prior, &model.meas).unwrap();
        let (m, p) = path.terminal();
        assert!((m[0] - 1.0).abs() < 1e-9, "{}", d.name());
        assert!((p[(0, 0)] - 0.5).abs() < 1e-9, "{}", d.name());
    }
}

#[test]
fn stochastic_flow_report_decays() {
    let model = random_instance(8, 3, 2);
    let params = FlowDescriptor::ConstantQ { q0: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]] }
        .build(&model.prior, &model.meas)
        .unwrap();
    let grid = LambdaGrid::uniform(200, Scheme::EulerMaruyama).unwrap();
    let a = stability_report(&params, &model.prior, &model.meas, &grid, &StabilityConfig::default(), 1).unwrap();
    assert_eq!(a.report.regime, Regime::ExponentialDecay);
    assert!(a.report.sigma > 0.0);
    assert!(a.report.fts.holds && a.report.ftss.holds);
    assert!(a.report.ellipsoid_deviation.is_none());
    let v = &a.trajectory.v_s;
    assert!(v.last().unwrap() <= &(v[0] * (-a.report.sigma).exp() * (1.0 + 1e-6)));
}
