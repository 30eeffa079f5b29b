//! End-to-end checks on the `focus` binary: exit codes, artifact layout, and
//! machine-readable output.

use assert_cmd::Command;
use predicates::prelude::*;
use predicates::str::contains;

fn focus() -> Command {
    Command::cargo_bin("focus").unwrap()
}

fn small_config() -> serde_json::Value {
    serde_json::json!({
        "name": "smoke",
        "seeds": [1],
        "data": {
            "source": "synthetic_classification",
            "spec": {
                "num_classes": 3,
                "vocab_per_class": 8,
                "shared_vocab": 10,
                "docs_per_class": 12,
                "doc_len": 6,
                "class_purity": 0.8
            },
            "partition": { "num_clients": 4, "mode": "iid", "seed": 1 },
            "task": { "id": "topic", "description": "label each note with its topic" }
        },
        "scenarios": [
            { "name": "zero", "method": "icl_zero_shot" },
            { "name": "own2", "method": "icl_kshot", "policy": "user_privacy", "k": 2 }
        ]
    })
}

#[test]
fn run_writes_the_artifact_set_and_report_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.json");
    std::fs::write(&cfg_path, small_config().to_string()).unwrap();
    let out = dir.path().join("runs");

    focus()
        .args(["run", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .assert()
        .success()
        .stdout(contains("run `smoke` complete").and(contains("macro_acc")));

    let run_dir = out.join("smoke");
    for name in [
        "metrics.json",
        "cost.json",
        "ledger.jsonl",
        "per_user.csv",
        "per_class.csv",
        "rounds.csv",
        "entropy.json",
        "meta.json",
    ] {
        assert!(run_dir.join(name).is_file(), "missing artifact {name}");
    }
    assert!(run_dir.join("plotdata").join("accuracy_by_k.csv").is_file());
    assert!(run_dir.join("plotdata").join("entropy_accuracy.csv").is_file());

    let per_user = std::fs::read_to_string(run_dir.join("per_user.csv")).unwrap();
    let header = per_user.lines().next().unwrap();
    assert_eq!(
        header,
        "scenario,seed,policy,k,client_id,n_train,n_test,accuracy,demo_count"
    );

    focus()
        .args(["report", run_dir.to_str().unwrap()])
        .assert()
        .success()
        .stdout(contains("scenario").and(contains("macro_acc")).and(contains("zero")));
}

#[test]
fn malformed_config_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["seeds"] = serde_json::json!([1, "two"]);
    let cfg_path = dir.path().join("bad.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();

    focus()
        .args(["run", cfg_path.to_str().unwrap()])
        .assert()
        .code(2)
        .stderr(contains("config error").and(contains("seeds[1]")));
}

#[test]
fn unknown_key_exits_2_and_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["scenarios"][0]["method"] = serde_json::json!("icl_zero_sho");
    let cfg_path = dir.path().join("bad2.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();

    focus()
        .args(["run", cfg_path.to_str().unwrap()])
        .assert()
        .code(2)
        .stderr(contains("config error").and(contains("icl_zero_sho")));
}

#[test]
fn infeasible_scenario_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["data"]["partition"]["num_clients"] = serde_json::json!(500);
    let cfg_path = dir.path().join("thin.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();

    focus()
        .args(["run", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .assert()
        .code(3)
        .stderr(contains("error"));
}

#[cfg(unix)]
#[test]
fn closed_stdout_kills_quietly_instead_of_panicking() {
    use std::os::unix::process::ExitStatusExt;

    let (reader, writer) = std::io::pipe().unwrap();
    drop(reader);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_focus"))
        .args(["cost", "--params", "1e8"])
        .stdout(writer)
        .stderr(std::process::Stdio::piped())
        .output()
        .unwrap();
    assert_eq!(out.status.signal(), Some(libc::SIGPIPE));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.contains("panicked"), "stderr: {stderr}");
}

#[test]
fn cost_prints_the_device_tallies_as_json() {
    let out = focus()
        .args(["cost", "--params", "1e10"])
        .assert()
        .success()
        .get_output()
        .stdout
        .clone();
    let doc: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(doc["in_context"]["bytes_down"].as_f64().unwrap(), 4e10);
    assert_eq!(doc["in_context"]["training_flops"].as_f64().unwrap(), 0.0);
    assert!(doc["federated"]["training_flops"].as_f64().unwrap() > 0.0);
    assert!(doc["federated"]["transfer_seconds_total"].as_f64().unwrap() > 0.0);
}
