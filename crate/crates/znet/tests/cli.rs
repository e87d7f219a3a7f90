use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn znet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_znet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ZNET_SEED")
        .output()
        .expect("spawn znet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_phantoms(dir: &Path, count: &str, extra: &[&str]) -> Output {
    fs::write(dir.join("spec.json"), r#"{"dims": [32, 32, 16], "radius": [3, 4]}"#).unwrap();
    let mut args = vec!["phantom", "--spec", "spec.json", "--count", count, "--out", "data"];
    args.extend_from_slice(extra);
    znet(&args, dir)
}

#[test]
fn phantom_writes_pairs_and_manifest_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = small_phantoms(a.path(), "20", &["--seed", "11"]);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    let ob = small_phantoms(b.path(), "20", &["--seed", "11", "--threads", "4"]);
    assert_eq!(code(&ob), 0);

    let files: Vec<_> = fs::read_dir(a.path().join("data")).unwrap().map(|e| e.unwrap().file_name()).collect();
    let headers = files.iter().filter(|f| f.to_string_lossy().ends_with(".zvol.json")).count();
    assert_eq!(headers, 40);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["volumes"].as_array().unwrap().len(), 20);

    for f in &files {
        let x = fs::read(a.path().join("data").join(f)).unwrap();
        let y = fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f:?} differs between runs");
    }
}

#[test]
fn seed_comes_from_environment_when_flag_absent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_phantoms(a.path(), "1", &["--seed", "5"]);
    fs::write(b.path().join("spec.json"), r#"{"dims": [32, 32, 16], "radius": [3, 4]}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_znet"))
        .args(["phantom", "--spec", "spec.json", "--count", "1", "--out", "data"])
        .current_dir(b.path())
        .env("ZNET_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let name = "data/phantom_000_image.zvol.raw";
    assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
}

#[test]
fn invalid_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"radius": [9, 20]}"#).unwrap();
    let o = znet(&["phantom", "--spec", "bad.json", "--out", "x"], d);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());

    fs::write(d.join("typo.json"), r#"{"radios": [3, 4]}"#).unwrap();
    assert_eq!(code(&znet(&["phantom", "--spec", "typo.json", "--out", "x"], d)), 2);
    assert_eq!(code(&znet(&["phantom"], d)), 1);
    assert_eq!(code(&znet(&["train", "--data", "missing", "--out", "o"], d)), 2);
    assert_eq!(code(&znet(&["train", "--data", "d", "--out", "o", "--policy", "patch7"], d)), 1);
    assert_eq!(code(&znet(&["params", "--arch", "resnet"], d)), 1);
    assert_eq!(code(&znet(&["params", "--input", "12x16x8"], d)), 1);
    assert_eq!(code(&znet(&["--threads", "0", "params"], d)), 1);
}

#[test]
fn params_for_every_arch() {
    let dir = tempfile::tempdir().unwrap();
    let mut totals = std::collections::HashMap::new();
    for arch in ["unet", "vnet", "zunet-v1", "zunet-v2", "zvnet-v1", "zvnet-v2"] {
        let o = znet(&["params", "--arch", arch], dir.path());
        assert_eq!(code(&o), 0, "{arch}");
        let out = stdout(&o);
        let last = out.lines().last().unwrap();
        let total: usize = last.strip_prefix("total ").unwrap().parse().unwrap();
        totals.insert(arch, total);
    }
    assert!(totals["zvnet-v2"] < totals["zvnet-v1"]);
    assert!((totals["zunet-v2"] as f64) < 0.5 * totals["unet"] as f64);
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = znet(&["gradcheck", "--seed", "0", "--max-entries", "20"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("0,conv3x3x3/weight,")), "{out}");
    assert!(out.lines().filter(|l| l.ends_with(",pass")).count() > 20);

    let o = znet(&["gradcheck", "--seed", "0", "--max-entries", "20", "--corrupt"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&small_phantoms(d, "6", &["--seed", "1"])), 0);
    fs::write(
        d.join("run.json"),
        r#"{"arch": {"name": "zunet-v2", "levels": 2, "base_channels": 4},
            "train": {"epochs": 2, "augment": "none"},
            "data": {"split": {"custom": {"train": 3, "val": 1, "test": 2}}}}"#,
    )
    .unwrap();
    let o = znet(&["train", "--config", "run.json", "--data", "data", "--out", "run", "--seed", "2"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["epoch_1.znet", "epoch_2.znet", "best.znet", "best.json", "run.json", "loss.csv", "val_iou.csv", "timing.csv", "metrics.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    // 3 volumes x 9 slabs, batch 2, no augmentation, 2 epochs
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "iteration,epoch,lr,loss");
    assert_eq!(loss.lines().count() - 1, 2 * 14);
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "volume_id,iou,tp,fp,fn,tn");
    assert_eq!(metrics.lines().count(), 3);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["seed"], 2);

    let arch = ["--arch", "zunet-v2", "--levels", "2", "--base-channels", "4"];
    let mut predict = vec!["predict", "--checkpoint", "run/best.znet", "--input", "data/phantom_000_image.zvol.json"];
    predict.extend_from_slice(&arch);
    let mut p1 = predict.clone();
    p1.extend_from_slice(&["--out", "p1", "--probabilities"]);
    let mut p2 = predict.clone();
    p2.extend_from_slice(&["--out", "p2"]);
    assert_eq!(code(&znet(&p1, d)), 0);
    assert_eq!(code(&znet(&p2, d)), 0);
    let pred = fs::read(d.join("p1/phantom_000_image_pred.zvol.raw")).unwrap();
    assert_eq!(pred.len(), 32 * 32 * 16);
    assert_eq!(pred, fs::read(d.join("p2/phantom_000_image_pred.zvol.raw")).unwrap());
    assert_eq!(fs::read(d.join("p1/phantom_000_image_prob.zvol.raw")).unwrap().len(), 4 * 32 * 32 * 16);

    let mut eval = vec!["eval", "--checkpoint", "run/best.znet", "--data", "data", "--out", "ev/metrics.csv"];
    eval.extend_from_slice(&arch);
    let o = znet(&eval, d);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 7);
    let mean: f64 = out.lines().last().unwrap().strip_prefix("mean_iou ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert_eq!(fs::read_to_string(d.join("ev/metrics.csv")).unwrap().lines().count(), 7);

    let o = znet(&["eval", "--checkpoint", "run/best.znet", "--data", "data", "--arch", "unet", "--levels", "2", "--base-channels", "4"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--arch"));
}

#[test]
fn lr_sweep_reports_best_rate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&small_phantoms(d, "3", &["--seed", "3"])), 0);
    fs::write(
        d.join("run.json"),
        r#"{"arch": {"name": "zunet-v2", "levels": 1, "base_channels": 2},
            "train": {"epochs": 1, "augment": "none"},
            "data": {"split": {"custom": {"train": 1, "val": 1, "test": 1}}}}"#,
    )
    .unwrap();
    let o = znet(&["train", "--config", "run.json", "--data", "data", "--out", "sweep", "--lr-sweep"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    assert!(stdout(&o).lines().last().unwrap().starts_with("best_lr "));
    for lr in ["0.1", "0.05", "0.01", "0.005"] {
        assert!(d.join(format!("sweep/lr_{lr}/best.znet")).exists());
    }
}
