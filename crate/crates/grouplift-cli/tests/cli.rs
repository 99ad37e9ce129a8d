use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_grouplift");

fn toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.json");
    let config = serde_json::json!({
        "model": { "channels": 16, "depth": 1, "heads": 2, "max_frames": 8, "dropout": 0.0 },
        "train": { "epochs": 2, "batch_size": 2, "frames_per_clip": 8, "n_sup": 1, "n_sub": 1, "clips_per_scene": 1 },
        "sampler": { "inference_steps": 2, "hypotheses": 2, "window": 8 },
        "synth": { "persons": [2, 3], "frames": 12 },
        "dataset": { "count": 4, "split_ratio": 0.75 }
    });
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn dataset(dir: &Path) {
    toy_config(dir);
    ok(dir, &["--config", "toy.json", "--seed", "3", "--out", "data", "generate"]);
}

#[test]
fn generate_writes_dataset_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let manifest = json(&tmp.path().join("data/manifest.json"));
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 4);
    let run = json(&tmp.path().join("data/run_manifest.json"));
    assert_eq!(run["command"], "generate");
    assert_eq!(run["seed"], 3);
    assert_eq!(run["config"]["synth"]["seed"], 3);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    for out in run["outputs"].as_array().unwrap() {
        assert!(Path::new(out.as_str().unwrap()).is_relative());
        assert!(tmp.path().join(out.as_str().unwrap()).exists());
    }
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    toy_config(tmp.path());
    ok(tmp.path(), &["--config", "toy.json", "--seed", "5", "--out", "a", "generate"]);
    ok(tmp.path(), &["--config", "toy.json", "--seed", "5", "--out", "b", "generate"]);
    let a = fs::read(tmp.path().join("a/train/scene_0000.json")).unwrap();
    let b = fs::read(tmp.path().join("b/train/scene_0000.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_of_ground_truth_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    ok(tmp.path(), &["--out", "ev", "eval", "--pred", "data/train", "--gt", "data/train"]);
    let m = json(&tmp.path().join("ev/metrics.json"));
    for key in ["mpjpe_rel", "mpjpe_abs", "mpjpe_root"] {
        assert_eq!(m[key].as_f64().unwrap(), 0.0, "{key}");
    }
    let csv = fs::read_to_string(tmp.path().join("ev/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(tmp.path().join("ev/run_manifest.json").exists());
}

#[test]
fn train_lift_eval_and_occlusion_study() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    ok(d, &["--config", "toy.json", "--out", "model", "train", "--data", "data"]);
    assert!(d.join("model/checkpoint.safetensors").exists());
    let log = fs::read_to_string(d.join("model/metrics.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    ok(d, &["--config", "toy.json", "--out", "pred", "lift", "--checkpoint", "model/checkpoint.safetensors", "--input", "data/test", "--hypotheses", "1"]);
    let pred = json(&d.join("pred/scene_0003.pred.json"));
    assert!(pred["joints_3d"].is_array());
    ok(d, &["--out", "ev", "eval", "--pred", "pred", "--gt", "data/test"]);
    let m = json(&d.join("ev/metrics.json"));
    assert!(m["mpjpe_abs"].as_f64().unwrap() > 0.0);

    ok(d, &["--config", "toy.json", "--out", "occ", "occlusion-study", "--checkpoint", "model/checkpoint.safetensors", "--data", "data", "--levels", "0..4"]);
    let csv = fs::read_to_string(d.join("occ/occlusion.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (n, row) in rows.iter().enumerate() {
        assert!(row.starts_with(&format!("{n},")));
    }
    assert!(fs::read_to_string(d.join("occ/occlusion.svg")).unwrap().starts_with("<svg"));

    ok(d, &["--out", "fig", "plot", "--input", "pred/scene_0003.pred.json", "--frames", "0,2"]);
    assert!(d.join("fig/scene_0003.pred_frame0002.svg").exists());
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    ok(d, &["--config", "toy.json", "--out", "ab", "ablate", "--data", "data", "--grid", "1:0"]);
    let rows = json(&d.join("ab/ablation.json"));
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["single", "multi", "multi+pe", "multi+pe+sup", "multi+pe+sup+sub", "perm-1-0"]);
    let csv = fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn track_builds_a_scene_from_detections() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let frames: Vec<Value> = (0..30)
        .map(|f| {
            let people: Vec<Value> = (0..2)
                .map(|p| {
                    let joints: Vec<[f64; 2]> = (0..15).map(|k| [100.0 + 400.0 * p as f64 + 4.0 * k as f64 + f as f64, 200.0 + 10.0 * k as f64]).collect();
                    serde_json::json!({ "joints": joints })
                })
                .collect();
            serde_json::json!({ "people": people })
        })
        .collect();
    fs::write(d.join("det.json"), serde_json::json!({ "frames": frames }).to_string()).unwrap();
    ok(d, &["--out", "trk", "track", "--detections", "det.json"]);
    let scene = json(&d.join("trk/tracked.json"));
    assert_eq!(scene["person_ids"].as_array().unwrap().len(), 2);
    assert_eq!(scene["meta"]["camera"], "placeholder");
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = run(d, &["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(d, &["eval", "--pred", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(d, &["--out", "x", "lift", "--checkpoint", "missing.safetensors", "--input", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!d.join("x/run_manifest.json").exists());
    fs::write(d.join("bad.json"), r#"{"trian": {}}"#).unwrap();
    let out = run(d, &["--config", "bad.json", "generate"]);
    assert_eq!(out.status.code(), Some(1));
}
