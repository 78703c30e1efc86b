use std::path::Path;
use std::process::{Command, Output};

use presto_core::driver::DriverSpec;
use presto_core::fixtures::{fix_b, fix_d, Fixture};
use presto_core::io::model_json;

fn presto(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_presto"));
    cmd.args(args).env_remove("PRESTO_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_fixture(dir: &Path, f: &Fixture, driver: Option<&DriverSpec>) -> String {
    let path = dir.join(format!("fix_{}.json", f.name));
    std::fs::write(&path, model_json(&f.tree, &f.obstacle, driver).unwrap()).unwrap();
    path.display().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn solve_writes_root_value() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_fixture(dir.path(), &fix_b(), None);
    let out_dir = dir.path().join("out");
    let out = presto(&["solve", "--model", &model, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("solution.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("0,value,0,5.0000000000000000e-1,")));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["Y0"].as_str().unwrap().parse::<f64>().unwrap(), 0.5);
}

#[test]
fn malformed_model_leaves_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bad.json");
    std::fs::write(&model, "{ \"version\": 1, \"dt\": ").unwrap();
    let out_dir = dir.path().join("out");
    let out = presto(&["solve", "--model", model.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 1);
    assert!(!out_dir.exists());
}

#[test]
fn configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_fixture(dir.path(), &fix_b(), None);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, format!("{{\"model\": {model:?}, \"colour\": \"blue\"}}")).unwrap();
    assert_eq!(code(&presto(&["solve", "--config", cfg.to_str().unwrap()], &[])), 1);
    assert_eq!(code(&presto(&["solve", "--model", &model, "--driver", "name=quadratic"], &[])), 1);
    assert_eq!(code(&presto(&["solve"], &[])), 1);
    assert_eq!(code(&presto(&["solve", "--mode", "sideways", "--model", &model], &[])), 1);
    assert_eq!(code(&presto(&["stop", "--model", &model, "--rule", "tau-alpha"], &[])), 1);
}

#[test]
fn solver_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_fixture(dir.path(), &fix_b(), Some(&DriverSpec::new("discount", &[("rho", 5.0)])));
    let out_dir = dir.path().join("out");
    let out = presto(&["solve", "--model", &model, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.exists());
}

#[test]
fn stop_reports_left_stop_on_fix_d() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_fixture(dir.path(), &fix_d(), None);
    let out_dir = dir.path().join("out");
    let out = presto(&["stop", "--model", &model, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tau: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("stopping_time.json")).unwrap()).unwrap();
    assert_eq!(tau[1][0], "left");
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["criterion"]["a"], true);
    assert_eq!(diag["value_per_atom"][0], 1.0);

    let grid = presto(&["stop", "--model", &model, "--mode", "grid"], &[]);
    let diag: serde_json::Value = serde_json::from_slice(&grid.stdout).unwrap();
    assert_eq!(diag["criterion"]["a"], false);
}

#[test]
fn verify_accepts_solver_output() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_fixture(dir.path(), &fix_d(), None);
    let out = presto(&["verify", "--model", &model], &[]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn seed_variable_overrides_generator() {
    let a = presto(&["solve", "--generate", "seed=1,stages=2"], &[("PRESTO_SEED", "9")]);
    let b = presto(&["solve", "--generate", "seed=9,stages=2"], &[]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let c = presto(&["solve", "--generate", "seed=1,stages=2"], &[]);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(code(&presto(&["solve", "--generate", "seed=1,stages=2"], &[("PRESTO_SEED", "x")])), 1);
}

#[test]
fn outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = presto(&["solve", "--generate", "seed=4,stages=3,marks=2", "--out", out_dir.to_str().unwrap()], &[]);
        assert_eq!(code(&out), 0);
        (std::fs::read(out_dir.join("solution.csv")).unwrap(), std::fs::read(out_dir.join("summary.json")).unwrap())
    };
    assert_eq!(run("first"), run("second"));
}

#[test]
fn oracle_compare_over_fifty_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out =
        presto(&["oracle-compare", "--generate", "seed=1,stages=3", "--count", "50", "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("oracle_compare.csv")).unwrap();
    let seeds: std::collections::BTreeSet<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds.len(), 50);
}

#[test]
fn sweep_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = presto(&["sweep", "--generate", "seed=3,stages=2", "--count", "5", "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("seed-3").join("report.json").exists());
}
