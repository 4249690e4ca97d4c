use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn fedone() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedone"))
}

fn write(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn synthetic() -> Value {
    json!({
        "prompt": {"length": 2, "vocab_size": 4, "tau": 0.5},
        "dataset": {"num_classes": 2, "examples_per_class": 10},
        "federation": {"clients": 4, "rounds": 50, "local": {"batch_size": 5, "learning_rate": 0.05}},
        "oracle": {"kind": "hidden_prompt"},
        "partition": {"kind": "even"},
        "target": {"metric": "loss", "threshold": 0.5},
        "seed": 1
    })
}

#[test]
fn successful_sweep_exits_zero_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), &synthetic());
    let out = dir.path().join("out");
    let status = fedone()
        .args(["--config", cfg.to_str().unwrap(), "--sweep", "1,2", "--seed", "5", "--budget", "30"])
        .args(["--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let rows = fedone_cli::sweep::read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.k_star).collect::<Vec<_>>(), vec![1, 2]);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["budget_rounds"], 30);
    assert_eq!(summary["config"]["seed"], 5);
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic();
    cfg["federation"]["k_star"] = 9.into();
    let path = write(dir.path(), &cfg);
    let out = fedone().args(["--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("federation.k_star"));

    std::fs::write(&path, "{\n  \"prompt\": {\n    \"length\": ,\n}").unwrap();
    let out = fedone().args(["--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn unreachable_endpoint_gives_failed_rows_and_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = json!({
        "prompt": {"length": 1, "vocab_size": 2},
        "federation": {"clients": 2, "rounds": 3, "local": {"batch_size": 1, "learning_rate": 0.05}},
        "oracle": {
            "kind": "remote_llm",
            "url": format!("http://127.0.0.1:{port}/v1/completions"),
            "model": "none",
            "vocabulary": ["a", "b"],
            "template": "yes or no?",
            "label_tokens": ["yes", "no"],
            "examples": [{"text": "x", "label": 0}, {"text": "y", "label": 1}],
            "validation": [{"text": "z", "label": 0}],
            "max_attempts": 1,
            "backoff_ms": 0
        },
        "partition": {"kind": "even"},
        "sweep": [1, 2],
        "target": {"metric": "accuracy", "threshold": 0.9},
        "output": dir.path().join("out"),
        "seed": 0
    });
    let path = write(dir.path(), &cfg);
    let out = fedone().args(["--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fedone_cli::sweep::read_metrics(&dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.status == fedone_cli::RunStatus::Failed && r.error.is_some()));
}

#[test]
fn missing_file_exits_nonzero() {
    let out = fedone().args(["--config", "/nonexistent/config.json"]).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
}
