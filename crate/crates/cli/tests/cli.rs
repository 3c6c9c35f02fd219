use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn amqc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amqc"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("data/manifest.json")).unwrap()).unwrap()
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.ini"), "[data]\nn_samples = 30\nseed = 5\naugment = false\n").unwrap();

    let out = amqc(dir.path(), &["--config", "run.ini", "gen-data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(dir.path());
    assert_eq!(m["samples"], 30);
    assert_eq!(m["config"]["data"]["seed"], 5);
    // untouched keys keep their defaults
    assert_eq!(m["config"]["train"]["epochs"], 30);

    let out = amqc(dir.path(), &["--config", "run.ini", "--seed", "9", "gen-data", "--n-samples", "12"]);
    assert!(out.status.success());
    let m = manifest(dir.path());
    assert_eq!(m["samples"], 12);
    assert_eq!(m["config"]["data"]["seed"], 9);
    assert_eq!(m["config"]["data"]["augment"], false);
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = amqc(dir.path(), &["--set", "loop.power_w=900", "run-loop"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind=config"), "{err}");
    assert!(err.contains("150"), "{err}");

    std::fs::write(dir.path().join("bad.ini"), "[data]\nno_such_key = 1\n").unwrap();
    assert_eq!(amqc(dir.path(), &["--config", "bad.ini", "gen-data"]).status.code(), Some(2));
    assert_eq!(amqc(dir.path(), &["--config", "missing.ini", "gen-data"]).status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = amqc(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train"][..], &["eval"], &["quantize"], &["report"]] {
        let out = amqc(dir.path(), args);
        assert_eq!(out.status.code(), Some(3), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("kind=dependency"));
    }
}

#[test]
fn pipeline_smoke_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = amqc(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["--set", "data.n_samples=100", "gen-data"]);
    ok(&["--set", "data.n_samples=100", "train", "--epochs", "1"]);
    ok(&["--set", "data.n_samples=100", "eval"]);
    let metrics = std::fs::read_to_string(d.join("out/metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["record"], "config");
    let summary = lines.last().unwrap();
    assert_eq!(summary["record"], "summary");
    // 4:1 split of 100 samples
    assert_eq!(summary["total"], 20);
    let support: u64 = lines.iter().filter(|l| l["record"] == "class").map(|l| l["support"].as_u64().unwrap()).sum();
    assert_eq!(support, 20);

    ok(&["--set", "data.n_samples=100", "quantize"]);
    ok(&["--set", "data.n_samples=100", "eval", "--quantized"]);
    ok(&["run-loop", "--layers", "20"]);
    ok(&["report"]);
    let report = std::fs::read_to_string(d.join("out/report.txt")).unwrap();
    assert!(!report.is_empty());
    let provenance = std::fs::read_to_string(d.join("out/loop.jsonl")).unwrap();
    assert!(provenance.lines().next().unwrap().contains("\"record\":\"config\""));
}
