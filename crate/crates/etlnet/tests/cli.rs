//! End-to-end tests of the `etlnet` binary: exit codes, determinism of
//! emitted files, and the synth -> prepare -> train -> evaluate flow.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_etlnet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn etlnet")
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("etlnet-clitest-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage:"));
}

#[test]
fn unknown_subcommand_exits_1() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown command"));
}

#[test]
fn unknown_flag_exits_1() {
    let out = run(&["params", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn params_prints_counts_for_all_variants() {
    let out = run(&["params", "--all"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for v in [
        "etlnet",
        "bilstm3",
        "tcn3",
        "single_tcn",
        "dual_tcn",
        "reduced_feature",
        "lstm_replacement",
        "triple_tcn_bilstm",
    ] {
        assert!(stdout.contains(v), "missing {v} in:\n{stdout}");
    }
    // Spot-check the base variant against the closed-form count.
    let line = stdout.lines().find(|l| l.starts_with("etlnet")).unwrap();
    assert!(line.contains("228673"), "{line}");
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tmpdir("synthdet");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    let args = |out: &Path| {
        vec![
            "synth".to_string(),
            "--seed".to_string(),
            "7".to_string(),
            "--synth.duration".to_string(),
            "500".to_string(),
            "--out".to_string(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let run1 = Command::new(bin()).args(args(&a)).output().unwrap();
    assert_eq!(run1.status.code(), Some(0));
    let run2 = Command::new(bin()).args(args(&b)).output().unwrap();
    assert_eq!(run2.status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.join("c.csv");
    let mut other = args(&c);
    other[2] = "8".to_string();
    Command::new(bin()).args(other).output().unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_required_output_is_a_usage_error() {
    let out = run(&["synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

fn synth_csv(dir: &Path, name: &str) -> PathBuf {
    let csv = dir.join(name);
    let out = run(&[
        "synth",
        "--seed",
        "11",
        "--synth.traces",
        "3",
        "--synth.duration",
        "600",
        "--synth.bumps",
        "8",
        "--synth.bump_len",
        "20",
        "--out",
        s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    csv
}

#[test]
fn prepare_train_evaluate_flow() {
    let dir = tmpdir("flow");
    let csv = synth_csv(&dir, "data.csv");
    let train_cache = dir.join("train.etlw");
    let val_cache = dir.join("val.etlw");

    let out = run(&[
        "prepare",
        "--data",
        s(&csv),
        "--window",
        "24",
        "--data.loo_index",
        "2",
        "--out-train",
        s(&train_cache),
        "--out-val",
        s(&val_cache),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let ckpt = dir.join("model.etln");
    let history = dir.join("history.csv");
    let out = run(&[
        "train",
        "--train-cache",
        s(&train_cache),
        "--val-cache",
        s(&val_cache),
        "--window",
        "24",
        "--model.tcn_filters",
        "2",
        "--model.lstm_hidden",
        "3",
        "--model.dense_hidden",
        "3",
        "--epochs",
        "1",
        "--checkpoint",
        s(&ckpt),
        "--history",
        s(&history),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    assert!(history.exists());
    assert!(Path::new(&format!("{}.manifest", s(&ckpt))).exists());
    let history_text = std::fs::read_to_string(&history).unwrap();
    assert!(history_text.starts_with("epoch,train_loss,val_accuracy"));
    assert_eq!(history_text.lines().count(), 2);

    let out = run(&["evaluate", "--checkpoint", s(&ckpt), "--cache", s(&val_cache)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("accuracy"));
    assert!(stdout.contains("confusion"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_window_mismatch_exits_2_naming_both_values() {
    let dir = tmpdir("mismatch");
    let csv = synth_csv(&dir, "data.csv");
    let train_cache = dir.join("train.etlw");
    let val_cache = dir.join("val.etlw");
    let out = run(&[
        "prepare",
        "--data",
        s(&csv),
        "--window",
        "24",
        "--out-train",
        s(&train_cache),
        "--out-val",
        s(&val_cache),
    ]);
    assert_eq!(out.status.code(), Some(0));

    let ckpt = dir.join("model.etln");
    let out = run(&[
        "train",
        "--train-cache",
        s(&train_cache),
        "--val-cache",
        s(&val_cache),
        "--window",
        "32",
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("24") && stderr.contains("32"), "{stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn evaluate_on_corrupt_cache_exits_2() {
    let dir = tmpdir("corrupt");
    let bad = dir.join("bad.etlw");
    std::fs::write(&bad, b"not a cache").unwrap();
    let ckpt = dir.join("missing.etln");
    std::fs::write(&ckpt, b"also junk").unwrap();
    let out = run(&["evaluate", "--checkpoint", s(&ckpt), "--cache", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_writes_report_and_manifest_reproduces_it() {
    let dir = tmpdir("sweep");
    let report1 = dir.join("report1.csv");
    let report2 = dir.join("report2.csv");
    let manifest = dir.join("run.manifest");
    let md = dir.join("report.md");
    let common = [
        "--sweep.variants",
        "etlnet,single_tcn",
        "--sweep.windows",
        "16,24",
        "--model.tcn_filters",
        "2",
        "--model.lstm_hidden",
        "3",
        "--model.dense_hidden",
        "3",
        "--synth.duration",
        "400",
        "--synth.bumps",
        "5",
        "--synth.bump_len",
        "16",
        "--epochs",
        "1",
        "--precision",
        "extended",
        "--seed",
        "42",
    ];
    let mut args = vec!["sweep"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--out", s(&report1), "--markdown", s(&md), "--manifest", s(&manifest)]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report1.exists() && md.exists() && manifest.exists());

    // Re-running purely from the manifest reproduces the report bit-for-bit.
    let out = run(&["sweep", "--config", s(&manifest), "--out", s(&report2)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(&report1).unwrap(),
        std::fs::read(&report2).unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn verify_passes_and_prints_per_check_lines() {
    let out = run(&["verify", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() > 30);
    assert!(!stdout.contains("\nFAIL "));
}
