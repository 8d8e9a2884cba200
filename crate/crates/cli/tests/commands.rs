use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn spa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spa"))
        .args(args)
        .arg("-q")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn gen(dir: &Path) -> String {
    let bench = path(&dir.join("bench"));
    assert!(spa(&["gen", "--seed", "1", "--out", &bench])
        .status
        .success());
    bench
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = spa(&[
        "gen",
        "--preset",
        "cub",
        "--out",
        &path(&dir.path().join("b")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cub"));
}

#[test]
fn missing_benchmark_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = spa(&["train", "--bench", &path(&dir.path().join("absent"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let bench = gen(dir.path());
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, "{\"epochs\": 2,,}").unwrap();
    let out = spa(&[
        "train",
        "--bench",
        &bench,
        "--config",
        &path(&cfg),
        "--out",
        &path(&dir.path().join("t")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bench = gen(dir.path());
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, "{\"epoch\": 2}").unwrap();
    let out = spa(&[
        "train",
        "--bench",
        &bench,
        "--config",
        &path(&cfg),
        "--out",
        &path(&dir.path().join("t")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_adaptation_scores_zero_on_fully_unseen_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let bench = gen(dir.path());
    let trained = path(&dir.path().join("t"));
    assert!(
        spa(&["train", "--bench", &bench, "--epochs", "2", "--out", &trained])
            .status
            .success()
    );
    let eval = dir.path().join("e");
    let out = spa(&[
        "eval",
        "--trained",
        &trained,
        "--bench",
        &bench,
        "--no-sas",
        "--out",
        &path(&eval),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics: Value =
        serde_json::from_slice(&fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["hm"]["value"].as_f64().unwrap() >= 0.0);
    assert!(eval.join("manifest.json").exists());
}

#[test]
fn tampered_trained_state_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let bench = gen(dir.path());
    let trained = dir.path().join("t");
    assert!(spa(&[
        "train",
        "--bench",
        &bench,
        "--epochs",
        "1",
        "--out",
        &path(&trained)
    ])
    .status
    .success());
    let ctx = trained.join("context.tsv");
    let text = fs::read_to_string(&ctx).unwrap().replacen('0', "1", 1);
    fs::write(&ctx, text).unwrap();
    let out = spa(&[
        "adapt",
        "--trained",
        &path(&trained),
        "--bench",
        &bench,
        "--out",
        &path(&dir.path().join("a")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn injected_sign_error_fails_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let out = spa(&[
        "gradcheck",
        "--inject-sign-error",
        "--out",
        &path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}
