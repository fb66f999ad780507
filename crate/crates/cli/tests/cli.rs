//! End-to-end tests of the command-line surface: commands, flags, artifacts,
//! and the stable exit codes (0 ok, 1 check failure, 2 config, 3 numeric,
//! 4 I/O).

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cfsnn")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cfsnn_cli_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create test dir");
    dir.join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn cfsnn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn unknown_command_and_flags_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
    let out = run(&["train", "--bogus"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_exits_2_with_key_named() {
    let out = run(&["train", "--set", "neuron.typo=1"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("neuron.typo"), "{err}");
}

#[test]
fn missing_idx_file_exits_4() {
    let outdir = tmp("io_fail");
    let out = run(&[
        "train",
        "--out",
        outdir.to_str().unwrap(),
        "--set",
        "dataset.kind=idx",
        "--set",
        "dataset.idx.train_images=/nonexistent/images.idx",
        "--set",
        "dataset.idx.train_labels=/nonexistent/labels.idx",
        "--set",
        "dataset.idx.test_images=/nonexistent/images.idx",
        "--set",
        "dataset.idx.test_labels=/nonexistent/labels.idx",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exploding_learning_rate_exits_3() {
    let outdir = tmp("numeric_fail");
    let out = run(&[
        "train",
        "--out",
        outdir.to_str().unwrap(),
        "--set",
        "train.lr=1e200",
        "--set",
        "train.epochs=4",
        "--set",
        "dataset.n=100",
        "--set",
        "dataset.test_n=50",
        "--set",
        "train.batch_size=25",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes_clean_and_fails_corrupted() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("end_to_end"), "{stdout}");

    // deliberately corrupted backward rule: exit 1 naming the op
    let out = run(&["gradcheck", "--set", "gradcheck.corrupt=conv2d"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("conv2d"), "{err}");

    // lambda = 0 skips the PNB category and reports it
    let out = run(&["gradcheck", "--set", "loss.lambda=0.0"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("SKIPPED"), "{stdout}");
}

#[test]
fn zero_epoch_run_writes_header_and_initial_checkpoint() {
    let outdir = tmp("zero_epochs");
    let out = run(&[
        "train",
        "--out",
        outdir.to_str().unwrap(),
        "--set",
        "train.epochs=0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(outdir.join("metrics.csv")).expect("metrics");
    assert_eq!(csv.lines().count(), 1, "{csv}");
    assert!(csv.starts_with("epoch,lr,train_loss,train_ce,train_pnb,test_acc,mean_firing_rate"));
    assert!(outdir.join("final.ckpt").exists());
    assert!(outdir.join("manifest.txt").exists());

    // fresh TSG net: every alpha equals scale * sigmoid(0) + bias = 2.5
    let inspect_out = run(&[
        "inspect",
        "--ckpt",
        outdir.join("final.ckpt").to_str().unwrap(),
        "--what",
        "alphas",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&inspect_out), 0);
    let alphas = std::fs::read_to_string(outdir.join("alphas.csv")).expect("alphas");
    for line in alphas.lines().skip(1) {
        let alpha = line.split(',').nth(2).expect("alpha column");
        assert_eq!(alpha, "2.500000", "{line}");
    }
}

#[test]
fn train_eval_energy_inspect_pipeline() {
    let outdir = tmp("pipeline");
    let out = run(&[
        "train",
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "9",
        "--set",
        "train.epochs=6",
        "--set",
        "train.batch_size=32",
        "--set",
        "dataset.n=200",
        "--set",
        "dataset.test_n=100",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(outdir.join("metrics.csv")).expect("metrics");
    assert_eq!(csv.lines().count(), 7); // header + 6 epochs
    let ckpt = outdir.join("final.ckpt");

    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "9",
        "--set",
        "dataset.test_n=100",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(outdir.join("eval.csv").exists());

    // noisy evaluation exercises the robustness path
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "9",
        "--noise",
        "gaussian:0.2",
        "--set",
        "dataset.test_n=100",
    ]);
    assert_eq!(code(&out), 0);

    let out = run(&[
        "energy",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "9",
        "--set",
        "dataset.test_n=100",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(outdir.join("energy.csv").exists());

    let out = run(&[
        "inspect",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--what",
        "spikes",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    // spike counts stay inside the circulate bounds [-K_N, K_P]
    let spikes = std::fs::read_to_string(outdir.join("spikes.csv")).expect("spikes");
    for line in spikes.lines().skip(1) {
        let value: i64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((-2..=2).contains(&value), "{line}");
    }

    let out = run(&[
        "inspect",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--what",
        "bogus",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn energy_arithmetic_check_mode() {
    let out = run(&["energy", "--sops", "1.52e9"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.trim(), "0.117 mJ");
}

#[test]
fn config_file_is_loaded_and_overridable() {
    let cfg_path = tmp("run.cfg");
    std::fs::write(&cfg_path, "# comment\ntrain.epochs = 2\ndataset.n = 120\ndataset.test_n = 60\n")
        .expect("write config");
    let outdir = tmp("from_file");
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--set",
        "train.epochs=3",
        "--set",
        "train.batch_size=30",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // the --set override wins over the file value
    let csv = std::fs::read_to_string(outdir.join("metrics.csv")).expect("metrics");
    assert_eq!(csv.lines().count(), 4);
    let manifest = std::fs::read_to_string(outdir.join("manifest.txt")).expect("manifest");
    assert!(manifest.contains("train.epochs = 3"), "{manifest}");
    assert!(manifest.contains("dataset.n = 120"), "{manifest}");
}
