use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpc_appset::experiment::{example1, example2};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpc-appset")).args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn preset_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["preset", "example1", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.toml",
        "trajectory.csv",
        "sensitivity.csv",
        "ellipsoid.json",
        "report.json",
        "identification.json",
        "samples.csv",
        "scenario_constraints.json",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(csv_rows(&dir.path().join("samples.csv")), 400);
    assert_eq!(csv_rows(&dir.path().join("trajectory.csv")), 100);
    assert_eq!(csv_rows(&dir.path().join("sensitivity.csv")), 100);
}

#[test]
fn run_honours_overrides_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = example2();
    cfg.steps = 60;
    cfg.app_cost.m = 60;
    let path = write_config(dir.path(), &cfg.to_toml_string().unwrap());
    let mut reports = Vec::new();
    for k in 0..2 {
        let out_dir = dir.path().join(format!("out{k}"));
        let out = bin(&["run", &path, "--samples", "25", "--seed", "7", "--order", "2", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(csv_rows(&out_dir.join("samples.csv")), 25);
        assert_eq!(csv_rows(&out_dir.join("trajectory.csv")), 60);
        reports.push(fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let report: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(report["sensitivity_order"], 2);
    assert_eq!(report["scenario"]["seed"], 7);
}

#[test]
fn compare_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &example1().to_toml_string().unwrap());
    let out = bin(&["compare", &path, "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("comparison.json")).unwrap()).unwrap();
    assert_eq!(c["simulations_perturbation"], 1);
    assert!(c["simulations_fd"].as_u64().unwrap() >= 9);
    assert!(c["spectral_rel_diff"].as_f64().unwrap() <= 5e-2);
    assert!(dir.path().join("timing.json").is_file());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out_dir = out_dir.to_str().unwrap();
    let bad = write_config(dir.path(), "name = \"x\"\nsteps = \"many\"\n");
    assert_eq!(bin(&["run", &bad, "--out", out_dir]).status.code(), Some(2));
    assert_eq!(bin(&["run", "/nonexistent/config.toml", "--out", out_dir]).status.code(), Some(2));

    let mut cfg = example1();
    cfg.theta_hat.push(0.1);
    let inconsistent = write_config(dir.path(), &cfg.to_toml_string().unwrap());
    let out = bin(&["run", &inconsistent, "--out", out_dir]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let mut cfg = example1();
    cfg.scenario = None;
    let no_scenario = write_config(dir.path(), &cfg.to_toml_string().unwrap());
    assert_eq!(bin(&["run", &no_scenario, "--seed", "1", "--out", out_dir]).status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_3() {
    // start outside the output bounds: the first QP is infeasible
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = example1();
    cfg.x0 = Some(vec![10.0]);
    let path = write_config(dir.path(), &cfg.to_toml_string().unwrap());
    let out = bin(&["run", &path, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_samples_skip_the_scenario_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &example1().to_toml_string().unwrap());
    let out_dir = dir.path().join("out");
    let out = bin(&["run", &path, "--samples", "0", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("report.json").is_file());
    assert!(!out_dir.join("samples.csv").exists());
}
