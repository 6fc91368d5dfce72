//! End-to-end runs of the command-line binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "data.height=16",
    "--set", "data.width=16",
    "--set", "data.train_images=4",
    "--set", "data.val_images=2",
    "--set", "model.feature_dim=8",
    "--set", "model.widths=[4, 8]",
    "--set", "training.batch_size=2",
    "--set", "training.iterations=4",
    "--set", "training.checkpoint_every=2",
];

fn mcibi(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcibi"))
        .args(args)
        .env("MCIBI_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn train_tiny(root: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec!["train", "--name", "tiny"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let out = mcibi(root, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    root.join("tiny/model.ckpt")
}

#[test]
fn train_eval_export_and_infer() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(root.path(), &[]);
    assert!(ckpt.exists());
    assert!(root.path().join("tiny/checkpoints/iter_000002.ckpt").exists());
    assert!(root.path().join("tiny/train_log.jsonl").exists());
    let ckpt = ckpt.to_str().unwrap();

    let out = mcibi(root.path(), &["eval", "--checkpoint", ckpt, "--iis-stages", "1,2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mIoU"));
    for f in ["eval_stages1.json", "eval_stages2.txt", "eval_stages2.svg", "stage_delta.txt"] {
        assert!(root.path().join("eval").join(f).exists(), "{f} missing");
    }

    let out = mcibi(root.path(), &["eval", "--checkpoint", ckpt, "--gt-weights", "--name", "oracle"]);
    assert_eq!(code(&out), 0);
    assert!(root.path().join("oracle/diagnostic_gt_weights.json").exists());

    let out = mcibi(root.path(), &["eval", "--checkpoint", ckpt, "--frozen-memory", "--name", "frozen"]);
    assert_eq!(code(&out), 0);
    assert!(root.path().join("frozen/ablation_frozen_memory_stages2.json").exists());

    let out = mcibi(root.path(), &["export-memory", "--checkpoint", ckpt, "--format", "json"]);
    assert_eq!(code(&out), 0);
    let bank: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(bank.is_object());

    let img = root.path().join("in.png");
    image::RgbImage::from_pixel(16, 16, image::Rgb([200, 40, 40])).save(&img).unwrap();
    let mask = root.path().join("mask.png");
    let out = mcibi(root.path(), &["infer", "--checkpoint", ckpt, "--input", img.to_str().unwrap(), "--output", mask.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(image::open(&mask).unwrap().to_luma8().dimensions(), (16, 16));
}

#[test]
fn unmet_threshold_exits_with_four() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(root.path(), &["--frozen-memory"]);
    let out = mcibi(root.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--min-miou", "1.01"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn config_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(code(&mcibi(root.path(), &["train", "--set", "memory.momentun=0.5"])), 2);
    assert_eq!(code(&mcibi(root.path(), &["train", "--set", "memory.momentum=2.0"])), 2);
    assert_eq!(code(&mcibi(root.path(), &["ablate", "--preset", "nope"])), 2);
    assert_eq!(code(&mcibi(root.path(), &["train", "--no-such-flag"])), 2);
}

#[test]
fn runtime_failures_exit_with_three() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("missing.ckpt");
    assert_eq!(code(&mcibi(root.path(), &["eval", "--checkpoint", missing.to_str().unwrap()])), 3);
}

#[test]
fn resume_under_another_config_needs_force() {
    let root = tempfile::tempdir().unwrap();
    train_tiny(root.path(), &[]);
    let mid = root.path().join("tiny/checkpoints/iter_000002.ckpt");
    let mut args = vec!["train", "--name", "again", "--resume", mid.to_str().unwrap(), "--set", "memory.momentum=0.3"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&mcibi(root.path(), &args)), 2);
    args.push("--force");
    assert_eq!(code(&mcibi(root.path(), &args)), 0);
}

#[test]
fn ablation_grid_over_custom_axes() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--grid", "inference.iis_stages=1,2", "--seeds", "0", "--name", "grid"];
    args.extend_from_slice(TINY);
    let out = mcibi(root.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(root.path().join("grid/ablation_grid.txt")).unwrap();
    assert!(table.contains("inference.iis_stages=2"));
}
