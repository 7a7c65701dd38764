//! Exit codes and output files of the `ftpose` binary.

use std::path::Path;
use std::process::{Command, Output};

fn ftpose(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftpose"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "model": {"image_height": 64, "image_width": 64, "embed_dim": 8, "heads": 2, "joints": 3},
  "iters": 1, "warmup": 0, "ratios": [1, 6], "grid_iters": 1,
  "train": {"steps": 20, "grid_steps": 2}
}"#;

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ftpose(&["bench", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(ftpose(&[], dir.path()).status.code(), Some(2));
    assert_eq!(ftpose(&["bench", "--iters", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(ftpose(&["bench", "--config", "missing.json"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), "{\"iters\": ").unwrap();
    let o = ftpose(&["bench", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("invalid configuration"));
    assert_eq!(ftpose(&["train-smoke", "--eps-hrb", "0"], dir.path()).status.code(), Some(2));
}

#[test]
fn bench_writes_versioned_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    let o = ftpose(&["bench", "--config", "small.json", "--seed", "3", "--out", "r.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["schema"], "ftpose-report/1");
    assert_eq!(r["config"]["seed"], 3);
    assert_eq!(r["config"]["model"]["image_height"], 64);
    assert_eq!(r["variants"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn ratio_grid_emits_all_cells() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    let o = ftpose(&["ratio-grid", "--config", "small.json", "--out", "g.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(r["cells"].as_array().unwrap().len(), 4);
    assert_eq!(std::fs::read_to_string(dir.path().join("g.csv")).unwrap().lines().count(), 5);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = ftpose(&["gradcheck", "--out", "g.json"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let bad = ftpose(&["gradcheck", "--corrupt-grad", "fusion.w_v"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("fusion.w_v"), "{}", stderr(&bad));
}

#[test]
fn gradcheck_rejects_large_model() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("big.json"), r#"{"train": {"model": {"image_height": 128, "image_width": 96}}}"#).unwrap();
    let o = ftpose(&["gradcheck", "--config", "big.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_smoke_curve_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = ftpose(&["train-smoke", "--seed", "1", "--out", "a.json"], dir.path());
    let b = ftpose(&["train-smoke", "--seed", "1", "--out", "b.json"], dir.path());
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    let ca = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(ca, std::fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert_eq!(ca.lines().count(), 202);
    assert!(ca.starts_with("step,loss\n0,"));
}

#[test]
fn train_smoke_without_learning_fails_threshold() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("flat.json"), r#"{"train": {"lr": 0.0}}"#).unwrap();
    let o = ftpose(&["train-smoke", "--config", "flat.json", "--iters", "5", "--out", "f.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("f.json")).unwrap()).unwrap();
    let curve: Vec<f64> = serde_json::from_value(r["curve"].clone()).unwrap();
    assert_eq!(curve.len(), 6);
    assert!(curve.iter().all(|&l| l == curve[0]));
}

#[test]
fn train_smoke_divergence_names_step() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("hot.json"), r#"{"train": {"lr": 1e9}}"#).unwrap();
    let o = ftpose(&["train-smoke", "--config", "hot.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn dump_synth_writes_frames() {
    let dir = tempfile::tempdir().unwrap();
    let o = ftpose(&["dump-synth", "--frames", "4", "--out", "frames"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("frames/frame_0003.pgm").exists());
    assert!(dir.path().join("frames/keypoints.json").exists());
}
