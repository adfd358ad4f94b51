//! End-to-end CLI smoke tests on a tiny dataset.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cyclevos"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().expect("spawn cyclevos");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_tiny(dir: &Path, split: &str, seed: u64) {
    run_ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--split",
        split,
        "--seed",
        &seed.to_string(),
        "--n-videos",
        "2",
        "--frames-per-video",
        "8",
        "--height",
        "32",
        "--width",
        "56",
        "--n-objects",
        "1",
        "--occluder-prob",
        "0.0",
    ]);
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["eval", "--bogus-flag", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one() {
    let out = bin()
        .args(["eval", "--ckpt", "/nonexistent", "--data", "/nonexistent", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_train_eval_pipeline_works() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    let evals = tmp.path().join("eval");
    synth_tiny(&data, "train", 7);
    synth_tiny(&data, "val", 99);

    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--base-width",
        "8",
        "--seed",
        "1",
        "--epochs",
        "2",
        "--batch-size",
        "1",
        "--lr",
        "1e-3",
        "--augment",
        "false",
        "--height",
        "32",
        "--width",
        "56",
    ]);
    assert!(ckpt.join("final/manifest.txt").is_file());
    assert!(ckpt.join("history.csv").is_file());
    assert!(ckpt.join("manifest.txt").is_file());
    assert!(ckpt.join("config.txt").is_file());
    let manifest = std::fs::read_to_string(ckpt.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status completed"));
    assert!(manifest.contains("wall_clock_s"));

    run_ok(&[
        "eval",
        "--ckpt",
        ckpt.join("final").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        evals.to_str().unwrap(),
        "--split",
        "val",
        "--gc",
        "off",
        "--height",
        "32",
        "--width",
        "56",
    ]);
    let report = std::fs::read_to_string(evals.join("report.csv")).unwrap();
    assert!(report.starts_with("video,J,F,JF"));
    assert!(report.contains("overall,"));

    // predictions in the annotation layout
    let preds = tmp.path().join("preds");
    run_ok(&[
        "infer",
        "--ckpt",
        ckpt.join("final").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
        "--split",
        "val",
        "--height",
        "32",
        "--width",
        "56",
    ]);
    assert!(preds.join("Annotations/synth000/00001.png").is_file());
}

#[test]
fn synth_is_bitwise_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth_tiny(&a, "train", 7);
    synth_tiny(&b, "train", 7);

    let img = "JPEGImages/synth001/00003.png";
    let ann = "Annotations/synth001/00003.png";
    assert_eq!(
        std::fs::read(a.join(img)).unwrap(),
        std::fs::read(b.join(img)).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join(ann)).unwrap(),
        std::fs::read(b.join(ann)).unwrap()
    );
}
