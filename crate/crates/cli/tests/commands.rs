//! End-to-end runs of the `cir` binary in scratch directories.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "synth.n_train=48",
    "--set",
    "synth.n_val=12",
    "--set",
    "training.epochs=1",
    "--set",
    "training.batch_size=8",
];

fn cir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cir"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn with_small(cmd: &str) -> Vec<&str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cir(dir.path(), &["gradcheck"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("skipped (frozen)"));

    let bad = cir(dir.path(), &["gradcheck", "--inject-fault", "qformer"]);
    assert_eq!(bad.status.code(), Some(1));

    let json = cir(dir.path(), &["gradcheck", "--json"]);
    let doc: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert!(doc.is_object());
}

#[test]
fn synth_train_eval_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["synth", "train", "eval"] {
        let out = cir(d, &with_small(cmd));
        assert!(
            out.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let train = std::fs::read_to_string(d.join("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 48);
    let log = std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(d.join("run/checkpoint.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    for key in [
        "recall@1",
        "recall@5",
        "recall@10",
        "recall_subset@1",
        "recall_subset@2",
        "recall_subset@3",
        "avg(recall@5,recall_subset@1)",
    ] {
        assert!(report["metrics"][key].is_number(), "{key}");
    }
    assert!(d.join("run/report.txt").exists());
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cir(dir.path(), &with_small("synth")).status.success());
    let out = cir(dir.path(), &with_small("eval"));
    assert_eq!(out.status.code(), Some(2));
    let untrained = cir(
        dir.path(),
        &[with_small("eval"), vec!["--untrained"]].concat(),
    );
    assert!(untrained.status.success());
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = cir(dir.path(), &["config", "--set", "training.nope=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"training": {"epochs": 2}}"#).unwrap();
    let out = cir(
        dir.path(),
        &[
            "config",
            "-c",
            cfg.to_str().unwrap(),
            "--set",
            "objective.beta=0.5",
        ],
    );
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["training"]["epochs"], 2);
    assert_eq!(doc["objective"]["beta"], 0.5);
}
