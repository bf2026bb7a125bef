use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TRAIN_OK: &str = r#"{
  "problem": {"kind": "quadratic", "m": 6, "n": 4, "cond": 100.0},
  "optimizer": {"kind": "shampoo", "eta0": 0.5, "kappa": 5, "tau": 5},
  "steps": 50,
  "thresholds": [1e-3],
  "record_timing": false
}"#;

fn shampoo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shampoo"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .expect("binary runs")
}

fn with_config(json: &str) -> (TempDir, String) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, json).unwrap();
    let p = path.to_str().unwrap().to_string();
    (dir, p)
}

#[test]
fn train_writes_outputs() {
    let (dir, cfg) = with_config(TRAIN_OK);
    let out = shampoo(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,wall_ms,stats_ms,precond_grad_ms,root_adopt_events,"));
    assert_eq!(metrics.lines().count(), 51);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_run"], 50);
    assert!(dir.path().join("out/events.csv").exists());
}

#[test]
fn seed_override_changes_run() {
    let (dir, cfg) = with_config(TRAIN_OK);
    let read = |seed: &str| {
        let out = shampoo(dir.path(), &["--config", &cfg, "--seed", seed, "train"]);
        assert_eq!(out.status.code(), Some(0));
        fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap()
    };
    assert_eq!(read("1"), read("1"));
    assert_ne!(read("1"), read("2"));
}

#[test]
fn config_errors_exit_2() {
    let (dir, cfg) = with_config(&TRAIN_OK.replace("\"steps\": 50", "\"steps\": 50, \"bogus\": 1"));
    assert_eq!(shampoo(dir.path(), &["--config", &cfg, "train"]).status.code(), Some(2));

    let (dir, cfg) = with_config(&TRAIN_OK.replace("\"kappa\": 5", "\"kappa\": 0"));
    assert_eq!(shampoo(dir.path(), &["--config", &cfg, "train"]).status.code(), Some(2));

    assert_eq!(shampoo(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(shampoo(dir.path(), &["suite", "nonexistent"]).status.code(), Some(2));
    assert_eq!(shampoo(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let (dir, cfg) = with_config(
        r#"{
  "problem": {"kind": "quadratic", "m": 4, "n": 4, "cond": 100.0},
  "optimizer": {"kind": "sgd", "eta": 1e6},
  "steps": 100
}"#,
    );
    let out = shampoo(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(3));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert!(summary["diverged_at"].is_u64());
}

#[test]
fn bench_and_lemma_commands() {
    let dir = TempDir::new().unwrap();
    let out = shampoo(dir.path(), &["bench-root", "--sizes", "8,16", "--cond", "1e3"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("out/bench_root.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let out = shampoo(dir.path(), &["verify-lemma", "--trials", "3", "--q", "inf", "--p", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/lemma.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
}

#[test]
fn trace_condition_writes_csv() {
    let (dir, cfg) = with_config(TRAIN_OK);
    let out = shampoo(dir.path(), &["--config", &cfg, "trace-condition", "--every", "10"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("out/condition.csv")).unwrap();
    assert!(csv.starts_with("step,tensor_id,side,condition"));
    assert!(csv.lines().count() > 1);
}
