use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use a3r_core::backbone::{save_feature_volume, FeatureVolume};
use a3r_core::tensor_io;
use ndarray::{Array1, Array2, Array3};

fn a3r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a3r"))
        .args(args)
        .env_remove("A3R_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = a3r(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Renders a reach scene and returns (frames dir, instruction).
fn scene(root: &Path) -> (PathBuf, String) {
    let dir = root.join("frames");
    ok(&["render", "--seed", "3", "--out", p(&dir)]);
    let instruction = fs::read_to_string(dir.join("instruction.txt")).unwrap();
    (dir, instruction)
}

fn dataset(root: &Path, episodes: usize) -> PathBuf {
    let dir = root.join("data");
    ok(&["gen-dataset", "--episodes", &episodes.to_string(), "--seed", "1", "--out", p(&dir)]);
    dir
}

#[test]
fn encode_writes_256_wide_z_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, lang) = scene(tmp.path());
    let out = tmp.path().join("enc");
    ok(&[
        "encode",
        "--calib",
        p(&frames.join("calib.json")),
        "--frames-dir",
        p(&frames),
        "--test-backbone",
        "--lang",
        &lang,
        "--ply",
        "--out",
        p(&out),
    ]);
    let z: Array1<f64> = tensor_io::load(&out.join("z.a3rt")).unwrap();
    assert_eq!(z.len(), 256);
    let att: Array1<f64> = tensor_io::load(&out.join("attention.a3rt")).unwrap();
    assert_eq!(att.len(), 512);
    assert!((att.sum() - 1.0).abs() < 1e-9);
    let ply = fs::read_to_string(out.join("cloud.ply")).unwrap();
    assert!(ply.contains("element vertex 512"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "encode");
    assert_eq!(manifest["config"]["encoder"]["embed_dim"], 256);
    for (_, path) in manifest["outputs"].as_object().unwrap() {
        assert!(Path::new(path.as_str().unwrap()).exists());
    }
    let t = &manifest["timings_us"];
    for k in ["deproject_us", "fuse_us", "crop_us", "fps_us", "pe_us", "pool_us"] {
        assert!(t[k].as_f64().unwrap() >= 0.0, "{k}");
    }
}

#[test]
fn no_attention_writes_one_hot_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, lang) = scene(tmp.path());
    let out = tmp.path().join("enc");
    ok(&[
        "encode",
        "--calib",
        p(&frames.join("calib.json")),
        "--frames-dir",
        p(&frames),
        "--test-backbone",
        "--lang",
        &lang,
        "--no-attention",
        "--out",
        p(&out),
    ]);
    let att: Array2<f64> = tensor_io::load(&out.join("attention.a3rt")).unwrap();
    assert_eq!(att.dim(), (256, 512));
    for row in att.outer_iter() {
        assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(row.sum(), 1.0);
    }
}

#[test]
fn missing_calibration_exits_3_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, _) = scene(tmp.path());
    let missing = tmp.path().join("no_such_calib.json");
    let out = a3r(&[
        "encode",
        "--calib",
        p(&missing),
        "--frames-dir",
        p(&frames),
        "--test-backbone",
        "--lang",
        "reach red sphere",
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_calib.json"));
}

#[test]
fn wrong_feature_width_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, lang) = scene(tmp.path());
    let feats = tmp.path().join("features");
    fs::create_dir_all(&feats).unwrap();
    for i in 0..2 {
        let v = FeatureVolume::new(Array3::from_elem((16, 16, 32), 0.1)).unwrap();
        save_feature_volume(&feats.join(format!("cam{i}_features.a3rt")), &v).unwrap();
    }
    let out = a3r(&[
        "encode",
        "--calib",
        p(&frames.join("calib.json")),
        "--frames-dir",
        p(&frames),
        "--features-dir",
        p(&feats),
        "--lang",
        &lang,
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, lang) = scene(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"embed_dim": 8, "bogus_field": 1}"#).unwrap();
    let out = a3r(&[
        "encode",
        "--calib",
        p(&frames.join("calib.json")),
        "--frames-dir",
        p(&frames),
        "--test-backbone",
        "--lang",
        &lang,
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_is_reproducible_and_curve_decreases() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 32);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&["train", "--dataset", p(&data), "--head", "nll", "--epochs", "30", "--out", p(&out)]);
        out
    };
    let a = run("a");
    let b = run("b");
    let files: Vec<_> = fs::read_dir(a.join("checkpoint")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(files.len() > 3);
    for f in &files {
        assert_eq!(
            fs::read(a.join("checkpoint").join(f)).unwrap(),
            fs::read(b.join("checkpoint").join(f)).unwrap(),
            "{f:?}"
        );
    }
    let csv = fs::read_to_string(a.join("loss.csv")).unwrap();
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 30);
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "moving average rose: {avg:?}");
    }
}

#[test]
fn train_rejects_unknown_head() {
    let tmp = tempfile::tempdir().unwrap();
    let out = a3r(&["train", "--dataset", p(tmp.path()), "--head", "transformer", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn checkpoint_feeds_encode() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 8);
    let trained = tmp.path().join("t");
    ok(&["train", "--dataset", p(&data), "--head", "cvae", "--epochs", "2", "--out", p(&trained)]);
    let (frames, lang) = scene(tmp.path());
    let out = tmp.path().join("enc");
    ok(&[
        "encode",
        "--calib",
        p(&frames.join("calib.json")),
        "--frames-dir",
        p(&frames),
        "--test-backbone",
        "--lang",
        &lang,
        "--checkpoint",
        p(&trained.join("checkpoint")),
        "--out",
        p(&out),
    ]);
    let z: Array1<f64> = tensor_io::load(&out.join("z.a3rt")).unwrap();
    assert_eq!(z.len(), 64);
}

#[test]
fn ablate_emits_variant_by_seed_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 10);
    let csv_path = tmp.path().join("abl.csv");
    ok(&[
        "ablate",
        "--dataset",
        p(&data),
        "--variants",
        "full,no-eecf,no-attention",
        "--seeds",
        "0,1",
        "--eval-scenes",
        "2",
        "--epochs",
        "2",
        "--out",
        p(&csv_path),
    ]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,initial_loss,final_loss,drift_0.4,drift_1,drift_2,mean_drift");
    assert_eq!(lines.len() - 1, 3 * 2);
    assert!(lines[1..].iter().any(|l| l.starts_with("full,")));
    assert!(tmp.path().join("abl.manifest.json").exists());
}

#[test]
fn ablate_rejects_unknown_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 4);
    let out = a3r(&[
        "ablate",
        "--dataset",
        p(&data),
        "--variants",
        "full,no-gripper",
        "--out",
        p(&tmp.path().join("a.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-gripper"));
}

#[test]
fn bench_reports_stage_rates() {
    let run = || -> serde_json::Value {
        serde_json::from_str(&ok(&["bench", "--n-iters", "10", "--threads", "1"])).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a["threads"], 1);
    assert_eq!(a["cloud_points"], 2048);
    assert_eq!(a["sampled_points"], 512);
    let stages = a["stage_us"].as_object().unwrap();
    assert_eq!(stages.len(), 6);
    let sum: f64 = stages.values().map(|v| v.as_f64().unwrap()).sum();
    assert!(sum <= a["wall_us"].as_f64().unwrap());
    let (ha, hb) = (a["total_hz"].as_f64().unwrap(), b["total_hz"].as_f64().unwrap());
    println!("bench total Hz: {ha:.1}, {hb:.1}");
    assert!((ha - hb).abs() / ha.max(hb) < 0.2, "{ha} vs {hb}");
}

#[test]
fn threads_default_comes_from_env() {
    let out = Command::new(env!("CARGO_BIN_EXE_a3r"))
        .args(["bench", "--n-iters", "1", "--image-size", "32", "--config"])
        .arg(write_small_config())
        .env("A3R_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["threads"], 2);
}

fn write_small_config() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("a3r-cli-test-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("small.json");
    fs::write(&path, r#"{"feature_dim": 64, "num_points": 32}"#).unwrap();
    path
}

#[test]
fn tensor_files_decode_generically() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, _) = scene(tmp.path());
    let depth = tensor_io::decode_float(&fs::read(frames.join("cam0_depth.a3rt")).unwrap()).unwrap();
    assert_eq!(depth.shape(), &[64, 64]);
}
