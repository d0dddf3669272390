//! Integration tests for the command-line driver.

use std::path::Path;
use std::process::{Command, Output};

use cgraflow::models;
use cgraflow::tiler::CgraConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cgraflow")
}

fn write_model(dir: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join("model.json");
    std::fs::write(&path, models::random_model_json(seed)).unwrap();
    path
}

fn write_config(dir: &Path, config: &CgraConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string(config).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn cgraflow")
}

#[test]
fn verify_passes_on_good_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), 7);
    let out = run(&["verify", "--model", model.to_str().unwrap(), "--seed", "3"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("verify OK"));
    assert!(stdout.contains("max |diff| = 0"));
}

#[test]
fn verify_detects_corrupted_weights() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), 7);
    let out = run(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--seed",
        "3",
        "--corrupt-weights",
    ]);
    assert_eq!(out.status.code(), Some(1), "corruption must surface as a mismatch");
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn missing_model_is_a_usage_error() {
    let out = run(&["verify"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["lower", "--model", "/nonexistent/model.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_config_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), 1);
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, "[]").unwrap();
    let out = run(&[
        "sweep",
        "--model",
        model.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), 11);
    let cfg = write_config(dir.path(), &CgraConfig::default());
    let args = [
        "sweep",
        "--model",
        model.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("config_rows,config_cols"));
}

#[test]
fn simulate_writes_output_and_counters() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), 13);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "simulate",
        "--model",
        model.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("output.bin").exists());
    let counters = std::fs::read_to_string(out_dir.join("counters.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&counters).unwrap();
    assert!(!v.as_array().unwrap().is_empty());
    assert!(v[0]["cycles"].as_u64().unwrap() > 0);
}

#[test]
fn simulate_report_is_backpressure_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), 17);
    let fast = dir.path().join("fast");
    let slow = dir.path().join("slow");
    let base = ["simulate", "--model", model.to_str().unwrap(), "--seed", "9"];
    let a = run(&[&base[..], &["--out", fast.to_str().unwrap()]].concat());
    let b = run(&[
        &base[..],
        &["--out", slow.to_str().unwrap(), "--p-valid", "0.2", "--p-ready", "0.5"],
    ]
    .concat());
    assert!(a.status.success() && b.status.success());
    assert_eq!(
        std::fs::read(fast.join("output.bin")).unwrap(),
        std::fs::read(slow.join("output.bin")).unwrap(),
        "stalls must not change results"
    );
    let cycles = |p: &Path| -> u64 {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p.join("counters.json")).unwrap())
                .unwrap();
        v.as_array().unwrap().iter().map(|c| c["cycles"].as_u64().unwrap()).sum()
    };
    assert!(cycles(&slow) > cycles(&fast));
}

#[test]
fn export_config_emits_program_json() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), 19);
    let out_dir = dir.path().join("prog");
    let out = run(&[
        "export-config",
        "--model",
        model.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(out_dir.join("program.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["arena_size"].is_number());
    assert!(!v["bundles"].as_array().unwrap().is_empty());
}
