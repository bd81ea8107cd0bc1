//! Black-box tests of the command-line interface: exit codes, run
//! directory artifacts, and byte-level determinism of the metrics stream.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fedalign")
}

const SMALL: &[&str] = &[
    "--n-clients",
    "3",
    "--local-steps",
    "4",
    "--batch-size",
    "8",
    "--k-classes",
    "4",
    "--x-dim",
    "5",
    "--y-dim",
    "4",
    "--hidden-dim",
    "6",
    "--embed-dim",
    "3",
    "--samples-per-class",
    "30",
    "--eval-pool-size",
    "5",
    "--seed",
    "9",
];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let dir_s = dir.display().to_string();
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out-dir", &dir_s]);
    run(&args)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    // unknown subcommand / unknown flag
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    // invalid config value, named in the message
    let out = run(&["train", "--tau=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
    // invalid strategy
    assert_eq!(run(&["train", "--strategy", "psychic"]).status.code(), Some(1));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let out = run(&["evaluate", "--model", "/nonexistent/model.bin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_replays_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(train_into(&a, &["--rounds", "2"]).status.code(), Some(0));
    assert_eq!(train_into(&b, &["--rounds", "2"]).status.code(), Some(0));
    for dir in [&a, &b] {
        for f in ["config.json", "metrics.jsonl", "final_model.bin", "run_summary.json"] {
            assert!(dir.join(f).exists(), "missing {f} in {}", dir.display());
        }
    }
    let ma = std::fs::read(a.join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(b.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb, "metrics.jsonl differs between replays");
    let fa = std::fs::read(a.join("final_model.bin")).unwrap();
    let fb = std::fs::read(b.join("final_model.bin")).unwrap();
    assert_eq!(fa, fb, "final_model.bin differs between replays");

    // evaluate and probe-distortion accept the saved snapshot
    let cfg = a.join("config.json").display().to_string();
    let model = a.join("final_model.bin").display().to_string();
    let out = run(&["evaluate", "--config", &cfg, "--model", &model]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "probe-distortion",
        "--config",
        &cfg,
        "--model",
        &model,
        "--retrain-steps",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // report summarizes both runs as CSV
    let out = run(&[
        "report",
        &a.display().to_string(),
        &b.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 3, "expected header + 2 rows: {text}");
}

#[test]
fn zero_rounds_gives_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r0");
    let out = train_into(&dir, &["--rounds", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn out_dir_env_override_has_lower_precedence_than_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("from_env");
    let flag_dir = tmp.path().join("from_flag");
    // env only
    let mut args = vec!["train", "--rounds", "2"];
    args.extend_from_slice(SMALL);
    let out = bin()
        .args(&args)
        .env("FEDALIGN_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(env_dir.join("metrics.jsonl").exists());
    // flag beats env
    let flag_s = flag_dir.display().to_string();
    args.extend_from_slice(&["--out-dir", &flag_s]);
    let out = bin()
        .args(&args)
        .env("FEDALIGN_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(flag_dir.join("metrics.jsonl").exists());
}

#[test]
fn partition_writes_csvs_and_histograms() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("parts");
    let dir_s = dir.display().to_string();
    let mut args = vec!["partition"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out-dir", &dir_s]);
    assert_eq!(run(&args).status.code(), Some(0));
    for i in 0..3 {
        assert!(dir.join(format!("client_{i}.csv")).exists());
    }
    assert!(dir.join("histograms.json").exists());
}

#[test]
fn check_bounds_exits_zero_on_clean_sweeps() {
    let out = run(&["check-bounds", "--instances", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("contrastive_ceiling"));
}
