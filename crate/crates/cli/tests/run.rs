use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_flowfilt");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn flowfilt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    flowfilt(&args)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    fs::copy(configs().join("canonical_model.json"), dir.join("canonical_model.json")).unwrap();
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

fn stderr_record(out: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).expect("stderr is a JSON record")
}

#[test]
fn moments_on_canonical_case_hit_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&configs().join("moments.json"), tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&tmp.path().join("summary.json"));
    assert!((s["mean"][0].as_f64().unwrap() - 1.0).abs() <= 1e-8);
    assert!((s["cov"][0][0].as_f64().unwrap() - 0.5).abs() <= 1e-8);
    let csv = fs::read_to_string(tmp.path().join("moments.csv")).unwrap();
    assert!(csv.starts_with("lambda,xbar_0,P_00\n"));
    assert_eq!(csv.lines().count(), 1002);
}

#[test]
fn stability_of_exact_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&configs().join("stability.json"), tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&tmp.path().join("summary.json"));
    assert_eq!(s["report"]["regime"], "ConstantV");
    assert!(s["report"]["ellipsoid_deviation"].as_f64().unwrap() <= 1e-8);
    assert!(fs::read_to_string(tmp.path().join("lyapunov.csv")).unwrap().starts_with("lambda,V_M,V_S\n"));
}

#[test]
fn manifest_lists_every_output_and_no_more() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&configs().join("flow_path.json"), tmp.path(), &["--seed", "99", "--steps", "50"]);
    assert!(out.status.success());
    let manifest = read_json(&tmp.path().join("run_manifest.json"));
    let mut listed: Vec<String> =
        manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let mut on_disk: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    listed.sort();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert_eq!(manifest["seeds"]["ensemble_seed"], 99);
    assert_eq!(manifest["config"]["grid"]["steps"], 50);
    assert!(manifest["version"].is_string());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert!(run(&configs().join("flow_path.json"), dir, &["--steps", "100"]).status.success());
    }
    for name in ["particles.csv", "trajectories.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn malformed_model_exits_with_parse_code_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{"model": "bad.json", "flow": {"flow": "exact"}, "ensemble": {"N": 10, "seed": 1},
            "experiment": "moments", "output_dir": "out"}"#,
    );
    fs::write(tmp.path().join("bad.json"), r#"{"x_prior": [0.0], "P_g": [[1.0]], "H": [[1.0, 2.0], [3.0]]"#).unwrap();
    let out = flowfilt(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(flowfilt_cli::exit::MODEL_PARSE));
    assert_eq!(stderr_record(&out)["error"], "model_parse");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn config_typos_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{"model": "canonical_model.json", "flow": {"flow": "exact"}, "ensemble": {"N": 10, "seed": 1},
            "experiment": "moments", "output_dir": "out", "stepz": 10}"#,
    );
    let out = flowfilt(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(flowfilt_cli::exit::CONFIG));
    assert!(!tmp.path().join("out").exists());

    let missing = write_config(
        tmp.path(),
        r#"{"model": "nope.json", "flow": {"flow": "exact"}, "ensemble": {"N": 10, "seed": 1},
            "experiment": "moments", "output_dir": "out"}"#,
    );
    assert_eq!(flowfilt(&["run", missing.to_str().unwrap()]).status.code(), Some(flowfilt_cli::exit::CONFIG));
}

#[test]
fn inadmissible_flow_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{"model": "canonical_model.json", "flow": {"flow": "constant_q", "Q0": [[-1.0]]},
            "ensemble": {"N": 10, "seed": 1}, "experiment": "moments", "output_dir": "out"}"#,
    );
    let out = flowfilt(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(flowfilt_cli::exit::INADMISSIBLE));
    assert_eq!(stderr_record(&out)["error"], "inadmissible");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn rk4_with_stochastic_flow_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{"model": "canonical_model.json", "flow": {"flow": "fixed_q"}, "grid": {"steps": 100, "scheme": "rk4"},
            "ensemble": {"N": 10, "seed": 1}, "experiment": "flow_path", "output_dir": "out"}"#,
    );
    let out = flowfilt(&["run", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(flowfilt_cli::exit::NUMERICAL));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn presets_subcommand_lists_presets() {
    let out = flowfilt(&["presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["exact", "fixed_q", "constant_q", "diagnostic"] {
        assert!(text.contains(name));
    }
}
