use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn hsiman(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsiman")).args(args).current_dir(cwd).output().expect("spawn hsiman")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = hsiman(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn value(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.trim_start().strip_prefix('=')).map(|v| v.trim().to_string()))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

fn small_dataset(dir: &Path) {
    std::fs::write(dir.join("synth.kv"), "count = 2\nbands = 8\nheight = 32\nwidth = 32\n").unwrap();
    ok(&["synth", "--output", "data", "--config", "synth.kv", "--seed", "3"], dir);
}

fn short_schedule(dir: &Path) {
    std::fs::write(
        dir.join("train.kv"),
        "stages = 1\nstage0.epochs = 2\npatch = 16\nstride = 16\nbatch_size = 2\n",
    )
    .unwrap();
}

#[test]
fn identical_cubes_score_perfectly() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--output", "gt.hsc", "--seed", "1"], dir.path());
    let out = ok(&["eval", "--input", "gt.hsc", "gt.hsc"], dir.path());
    assert_eq!(value(&out, "psnr"), "inf");
    assert_eq!(value(&out, "ssim"), "1.0000");
    assert_eq!(value(&out, "sam"), "0.0000");
    let csv = ok(&["eval", "--input", "gt.hsc", "gt.hsc", "--csv"], dir.path());
    assert_eq!(csv.lines().nth(1), Some("inf,1.0000,0.0000,0"));
}

#[test]
fn gaussian_fifty_lands_near_its_psnr() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--output", "gt.hsc", "--seed", "6"], dir.path());
    ok(&["simulate", "--input", "gt.hsc", "--output", "noisy.hsc", "--sigma", "50", "--seed", "6"], dir.path());
    let psnr: f64 = value(&ok(&["eval", "--input", "noisy.hsc", "gt.hsc"], dir.path()), "psnr").parse().unwrap();
    assert!((psnr - 14.15).abs() < 0.1, "psnr {psnr}");
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = hsiman(&["eval", "--input", "absent.hsc", "absent.hsc"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.hsc"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(hsiman(&["synth", "--output", "x.hsc", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(hsiman(&["simulate", "--input", "a", "--output", "b", "--noise", "pink"], dir.path()).status.code(), Some(2));
}

#[test]
fn sigma_without_gaussian_is_rejected() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--output", "gt.hsc"], dir.path());
    let out = hsiman(&["simulate", "--input", "gt.hsc", "--output", "n.hsc", "--noise", "stripe", "--sigma", "5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_trains_resumes_denoises_and_exports() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_dataset(d);
    short_schedule(d);
    ok(&["train", "--input", "data", "--output", "m.manw", "--config", "train.kv", "--seed", "4"], d);
    let losses = std::fs::read_to_string(d.join("m.loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3, "{losses}");
    ok(&["train", "--input", "data", "--output", "m.manw", "--model", "m.manw"], d);

    ok(&["simulate", "--input", "data/synth_000.hsc", "--output", "noisy.hsc", "--sigma", "30"], d);
    let out = ok(&["denoise", "--input", "noisy.hsc", "--model", "m.manw", "--output", "clean.hsc"], d);
    assert!(out.contains("denoised 8x32x32"), "{out}");
    let psnr = value(&ok(&["eval", "--input", "clean.hsc", "data/synth_000.hsc"], d), "psnr");
    assert!(psnr.parse::<f64>().unwrap().is_finite());

    ok(&["export-attn", "--input", "noisy.hsc", "--model", "m.manw", "--output", "attn", "--layer", "skip"], d);
    assert!(d.join("attn/skip0.skip_gate.hsc").exists());
    assert!(!d.join("attn/stem.spectral_gate.hsc").exists());
    ok(&["export-attn", "--input", "noisy.hsc", "--model", "m.manw", "--output", "attn", "--layer", "0"], d);
    assert!(d.join("attn/stem.spectral_gate.hsc").exists());
    assert!(d.join("attn/stem.band_weights.csv").exists());
    let bad = hsiman(&["export-attn", "--input", "noisy.hsc", "--model", "m.manw", "--output", "attn", "--layer", "42"], d);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn wrong_band_count_names_both_counts() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_dataset(d);
    std::fs::write(d.join("train.kv"), "stages = 1\nstage0.epochs = 0\npatch = 16\n").unwrap();
    ok(&["train", "--input", "data", "--output", "m.manw", "--config", "train.kv"], d);
    ok(&["synth", "--output", "wide.hsc"], d);
    let out = hsiman(&["denoise", "--input", "wide.hsc", "--model", "m.manw", "--output", "o.hsc"], d);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("31") && err.contains('8'), "{err}");
}

#[test]
fn untrained_skip_gates_sit_at_one_half() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_dataset(d);
    std::fs::write(d.join("train.kv"), "stages = 1\nstage0.epochs = 0\npatch = 16\n").unwrap();
    ok(&["train", "--input", "data", "--output", "m.manw", "--config", "train.kv"], d);
    ok(&["export-attn", "--input", "data/synth_001.hsc", "--model", "m.manw", "--output", "attn", "--layer", "skip0"], d);
    let gate = hsiman_core::hsidata::read_hsc(d.join("attn/skip0.skip_gate.hsc")).unwrap();
    assert!(gate.data().iter().all(|&v| v == 0.5));
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let out = ok(&["gradcheck", "--seed", "2"], dir.path());
    assert!(out.contains("checks passed"), "{out}");
}
