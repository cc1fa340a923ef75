use std::fs;
use std::path::{Path, PathBuf};

use amq_core::cli::{run_args, RunOptions};
use amq_core::config::RunConfig;
use serde_json::Value;

const OPTS: RunOptions = RunOptions { timestamp: 1_234_567_890 };

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::three_server_default();
    cfg.train.epochs = 2_000;
    cfg.oracle.cap = 6;
    cfg.eval.n_states = 10;
    cfg.eval.reps = 5;
    cfg.eval.horizon = 50;
    cfg.eval.seeds = vec![0, 1];
    cfg.lyapunov.box_cap = 12;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn amq(args: &[&str]) -> i32 {
    let mut full = vec!["amq", "--quiet"];
    full.extend_from_slice(args);
    run_args(full, &OPTS)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.json", &small_config());
    assert_eq!(amq(&["validate", "--config", s(&good)]), 0);

    let mut cfg = small_config();
    cfg.behavior.c0 = 0.95;
    let bad_value = write_config(dir.path(), "bad.json", &cfg);
    let out = dir.path().join("v");
    assert_eq!(amq(&["validate", "--config", s(&bad_value), "--out", s(&out)]), 1);
    let report = read_json(&out.join("validation.json"));
    assert_eq!(report["valid"], false);
    assert_eq!(report["field"], "behavior.C0");

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"game": {"lambda": 5, "mu": [2, 3, 4], "c1": 8, "c2": 6, "gamma": 0.9}, "trian": {}}"#)
        .unwrap();
    assert_eq!(amq(&["validate", "--config", s(&unknown)]), 2);
    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    assert_eq!(amq(&["validate", "--config", s(&broken)]), 2);
    assert_eq!(amq(&["validate", "--config", s(&dir.path().join("missing.json"))]), 2);
    assert_eq!(amq(&["no-such-command"]), 2);
}

#[test]
fn train_writes_trajectory_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("run");
    assert_eq!(amq(&["train", "--config", s(&config), "--out", s(&out)]), 0);

    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..4], &["step", "td_error", "state_l1", "w_1_1"]);
    assert_eq!(header.len(), 3 + 15);
    assert_eq!(*header.last().unwrap(), "w_3_5");
    assert_eq!(lines.count(), 21);

    let summary = read_json(&out.join("train_summary.json"));
    assert_eq!(summary["diverged"], false);
    assert_eq!(summary["final_weights"].as_array().unwrap().len(), 15);

    let manifest = read_json(&out.join("train.manifest.json"));
    assert_eq!(manifest["timestamp"], 1_234_567_890u64);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert_eq!(files, ["trajectory.csv", "train_summary.json", "train.manifest.json"]);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.eta0 = 5.0;
    cfg.train.tau = 1e9;
    cfg.train.epochs = 50_000;
    let config = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("run");
    assert_eq!(amq(&["train", "--config", s(&config), "--out", s(&out)]), 3);
    let summary = read_json(&out.join("train_summary.json"));
    assert_eq!(summary["diverged"], true);
    assert!(summary["divergence_step"].as_u64().is_some());
    assert!(summary["final_weights"].is_null());
}

#[test]
fn oracle_guard_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.game = amq_core::model::GameParams::six_server();
    cfg.oracle.cap = 15;
    let config = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("run");
    assert_eq!(amq(&["oracle", "--config", s(&config), "--out", s(&out)]), 4);
    assert!(!out.join("equilibrium.json").exists());
}

#[test]
fn drift_check_exit_reflects_certification() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.lyapunov.nu_grid = vec![0.1, 0.2];
    let good = write_config(dir.path(), "good.json", &cfg);
    let out = dir.path().join("d");
    assert_eq!(amq(&["drift-check", "--config", s(&good), "--out", s(&out)]), 0);
    let report = read_json(&out.join("drift_report.json"));
    assert_eq!(report["table"].as_array().unwrap().len(), 2);
    assert!(report["best_nu"].as_f64().is_some());

    cfg.lyapunov.nu_grid = vec![5.0];
    let bad = write_config(dir.path(), "bad.json", &cfg);
    assert_eq!(amq(&["drift-check", "--config", s(&bad)]), 1);
}

#[test]
fn audit_basis_reports_both_audits() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("a");
    assert_eq!(amq(&["audit-basis", "--config", s(&config), "--out", s(&out)]), 0);
    let report = read_json(&out.join("basis_audit.json"));
    assert_eq!(report["basis"], "amq2");
    assert!(report["gradient"]["certified_b"].as_u64().is_some());
    assert!(report["subexponential"]["violations"].is_array());
}

#[test]
fn full_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("run");
    let o = s(&out);
    let weights = out.join("train_summary.json");
    assert_eq!(amq(&["report", "--out", o]), 2);
    assert_eq!(amq(&["train", "--config", s(&config), "--out", o]), 0);
    assert_eq!(amq(&["oracle", "--config", s(&config), "--out", o]), 0);
    for name in ["equilibrium.json", "equilibrium.csv", "stationary.csv", "fixed_point.json", "oracle_summary.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert_eq!(amq(&["eval", "--config", s(&config), "--weights", s(&weights), "--oracle", o, "--out", o]), 0);
    let metrics = read_json(&out.join("metrics_amq2.json"));
    assert_eq!(metrics["metrics"]["per_seed"].as_array().unwrap().len(), 2);
    let consistency = fs::read_to_string(out.join("consistency_amq2.csv")).unwrap();
    assert!(consistency.starts_with("state,learned_p1,reference_p1,tv\n"));
    assert_eq!(consistency.lines().count(), 1 + 2 * 10);

    assert_eq!(amq(&["report", "--out", o]), 0);
    let convergence = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(convergence.starts_with("step,normalized_distance\n0,1.0"));
    let table = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(table.starts_with("metric,system,basis,value\n"));
    assert!(table.contains("normalized_mean_cost,3-server,amq2,"));
}

#[test]
fn eval_rejects_mismatched_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let config = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("run");
    let o = s(&out);
    assert_eq!(amq(&["train", "--config", s(&config), "--out", o]), 0);
    assert_eq!(amq(&["oracle", "--config", s(&config), "--out", o]), 0);

    let mut other = cfg.clone();
    other.basis.kind = "amq1".into();
    let other_config = write_config(dir.path(), "amq1.json", &other);
    let weights = out.join("train_summary.json");
    assert_eq!(amq(&["eval", "--config", s(&other_config), "--weights", s(&weights), "--oracle", o, "--out", o]), 2);
    assert_eq!(
        amq(&[
            "eval",
            "--config",
            s(&config),
            "--weights",
            s(&dir.path().join("none.json")),
            "--oracle",
            o,
            "--out",
            o
        ]),
        2
    );
}
