use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tpcn::PredictionFile;
use tpcn_core::checkpoint;
use tpcn_core::network::{rank_trajectories, Model};
use tpcn_core::scene::{load_scene, normalize, save_scene, SceneFormat};

const TINY_MODEL: &str = r#"{
    "n_stages": 1,
    "embed_width": 6,
    "spatial": {"radius_mlp": 4, "point_out": 4, "voxel": 4, "bottleneck_mid": 2,
                "bottleneck_blocks": 1, "interp_hidden": 2, "out": 6},
    "temporal": {"interval_mlp": 4, "pool_mlp": 4, "pool_out": 6, "out": 6},
    "head_hidden": 8
}"#;

fn tpcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpcn"))
        .args(args)
        .env_remove("TPCN_SEED")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, n: usize, seed: u64, profile: &str) {
    let out = tpcn(&[
        "gen-synthetic",
        "--out",
        arg(dir),
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--profile",
        profile,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

/// Writes a config for the tiny model next to `data` and returns its path.
fn write_config(root: &Path, model: &str, epochs: u32) -> PathBuf {
    let path = root.join("run.json");
    let text = format!(
        r#"{{"model": {model}, "train": {{"epochs": {epochs}, "batch_size": 2}},
            "data_dir": "data", "checkpoint_dir": "ckpt", "log_path": "train.jsonl", "seed": 5}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

/// Data, config and a one-epoch checkpoint under `root`.
fn trained(root: &Path) -> PathBuf {
    gen(&root.join("data"), 4, 11, "mixed");
    let config = write_config(root, TINY_MODEL, 1);
    let out = tpcn(&["train", "--config", arg(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));
    config
}

#[test]
fn gen_synthetic_writes_scenes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("a"), 16, 2, "mixed");
    let names: Vec<String> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    assert_eq!(names.len(), 16);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 16);
}

#[test]
fn gen_synthetic_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("a"), 5, 9, "mixed");
    gen(&dir.path().join("b"), 5, 9, "mixed");
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
}

/// Curvature of the circle through three points.
fn circumcurvature(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    2.0 * cross.abs() / (d(a, b) * d(b, c) * d(a, c))
}

#[test]
fn turn_profile_futures_are_curved() {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("turn"), 12, 4, "turn");
    gen(&dir.path().join("straight"), 12, 4, "straight");
    let curvatures = |sub: &str| -> Vec<f64> {
        (0..12)
            .map(|i| {
                let path = dir.path().join(sub).join(format!("scene_{i:04}.json"));
                let f = load_scene(&path, SceneFormat::Json).unwrap().future.unwrap();
                circumcurvature(f[0], f[14], f[29])
            })
            .collect()
    };
    // Constant speed and yaw rate trace an exact arc of curvature yaw_rate / speed,
    // bounded by the default generator ranges.
    for k in curvatures("turn") {
        assert!((0.15 / 14.0 - 1e-9..=0.35 / 5.0 + 1e-9).contains(&k), "curvature {k}");
    }
    for k in curvatures("straight") {
        assert!(k < 1e-9, "curvature {k}");
    }
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = tpcn(&["train", "--config", arg(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochz"));
}

#[test]
fn missing_data_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_MODEL, 1);
    let out = tpcn(&["train", "--config", arg(&config)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn single_interval_config_trains() {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("data"), 2, 1, "mixed");
    let model = TINY_MODEL.replacen("\"n_stages\": 1", "\"n_stages\": 1, \"intervals\": [2]", 1);
    let config = write_config(dir.path(), &model, 1);
    let out = tpcn(&["train", "--config", arg(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = checkpoint::load(&dir.path().join("ckpt/latest")).unwrap();
    assert_eq!(ckpt.model.intervals, vec![2]);
    let mil: Vec<&String> = ckpt.state.params.names().filter(|n| n.contains(".mil.")).collect();
    assert!(!mil.is_empty());
    assert!(mil.iter().all(|n| n.contains(".mil.0.")), "{mil:?}");
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(dir.path());
    let out = tpcn(&[
        "train",
        "--config",
        arg(&config),
        "--epochs",
        "2",
        "--checkpoint-dir",
        arg(&dir.path().join("other")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        checkpoint::load(&dir.path().join("other/latest")).unwrap().state.epoch,
        2
    );
}

#[test]
fn resume_appends_to_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(dir.path());
    let out = tpcn(&[
        "train",
        "--config",
        arg(&config),
        "--epochs",
        "3",
        "--resume",
        arg(&dir.path().join("ckpt/epoch-0001")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(epochs, vec![0, 1, 2]);
}

#[test]
fn eval_is_deterministic_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(dir.path());
    let (ckpt, data) = (dir.path().join("ckpt/latest"), dir.path().join("data"));
    let args = [
        "eval",
        "--config",
        arg(&config),
        "--ckpt",
        arg(&ckpt),
        "--data",
        arg(&data),
    ];
    let a = tpcn(&args);
    let b = tpcn(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["n_scenes"], 4);
    for key in ["minADE_1", "minFDE_1", "MR_1", "minADE_6", "minFDE_6", "MR_6"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn eval_on_empty_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(dir.path());
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = tpcn(&[
        "eval",
        "--config",
        arg(&config),
        "--ckpt",
        arg(&dir.path().join("ckpt/latest")),
        "--data",
        arg(&dir.path().join("empty")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_with_mismatched_config_exits_3_naming_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let wider = TINY_MODEL.replacen("\"head_hidden\": 8", "\"head_hidden\": 9", 1);
    let other = dir.path().join("wider.json");
    fs::write(&other, format!(r#"{{"model": {wider}}}"#)).unwrap();
    let out = tpcn(&[
        "eval",
        "--config",
        arg(&other),
        "--ckpt",
        arg(&dir.path().join("ckpt/latest")),
        "--data",
        arg(&dir.path().join("data")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("head."), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let params = dir.path().join("ckpt/latest/params.bin");
    let bytes = fs::read(&params).unwrap();
    fs::write(&params, &bytes[..bytes.len() / 2]).unwrap();
    let scene = dir.path().join("data/scene_0000.json");
    let out = tpcn(&[
        "predict",
        "--ckpt",
        arg(&dir.path().join("ckpt/latest")),
        "--scene",
        arg(&scene),
        "--out",
        arg(&dir.path().join("p.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

fn predict(root: &Path, scene: &Path) -> PredictionFile {
    let out_path = root.join("pred.json");
    let out = tpcn(&[
        "predict",
        "--ckpt",
        arg(&root.join("ckpt/latest")),
        "--scene",
        arg(scene),
        "--out",
        arg(&out_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    serde_json::from_str(&fs::read_to_string(out_path).unwrap()).unwrap()
}

#[test]
fn predictions_are_ranked_world_frame_model_outputs() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let scene_path = dir.path().join("data/scene_0002.json");
    let file = predict(dir.path(), &scene_path);

    let ckpt = checkpoint::load(&dir.path().join("ckpt/latest")).unwrap();
    let model = Model::new(ckpt.model.clone()).unwrap();
    let scene = normalize(&load_scene(&scene_path, SceneFormat::Json).unwrap()).unwrap();
    let raw = model.predict(&ckpt.state.params, &scene).unwrap();

    let (k, t) = (model.config.modes, model.config.horizon);
    assert_eq!(file.trajectories.iter().flatten().count() * 2, k * t * 2);
    assert_eq!(file.displacements.len(), k);
    assert_eq!(file.model_index, rank_trajectories(&raw.displacements));
    assert!(file.displacements.windows(2).all(|w| w[0] <= w[1]));
    for (rank, &slot) in file.model_index.iter().enumerate() {
        assert_eq!(file.displacements[rank], raw.displacements[slot]);
        for (p, q) in file.trajectories[rank].iter().zip(&raw.trajectories[slot]) {
            let local = file.frame.to_local(*p);
            assert!((local[0] - q[0]).abs() < 1e-9 && (local[1] - q[1]).abs() < 1e-9);
        }
    }
}

fn paths_with_stroke<'a>(doc: &'a roxmltree::Document, color: &str) -> Vec<roxmltree::Node<'a, 'a>> {
    doc.descendants()
        .filter(|n| n.has_tag_name("path") && n.attribute("stroke") == Some(color))
        .collect()
}

#[test]
fn plot_draws_each_layer() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let scene = dir.path().join("data/scene_0001.json");
    predict(dir.path(), &scene);
    let svg_path = dir.path().join("plot.svg");
    let out = tpcn(&[
        "plot",
        "--scene",
        arg(&scene),
        "--pred",
        arg(&dir.path().join("pred.json")),
        "--out",
        arg(&svg_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(paths_with_stroke(&doc, "green").len(), 6);
    assert_eq!(paths_with_stroke(&doc, "red").len(), 1);
    assert_eq!(paths_with_stroke(&doc, "yellow").len(), 1);
    let raw = load_scene(&scene, SceneFormat::Json).unwrap();
    assert_eq!(paths_with_stroke(&doc, "grey").len(), raw.map.len());
}

#[test]
fn plot_without_ground_truth_has_no_red_path() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let mut raw = load_scene(&dir.path().join("data/scene_0001.json"), SceneFormat::Json).unwrap();
    raw.future = None;
    let scene = dir.path().join("blind.json");
    save_scene(&scene, &raw, SceneFormat::Json).unwrap();
    predict(dir.path(), &scene);
    let svg_path = dir.path().join("plot.svg");
    let out = tpcn(&[
        "plot",
        "--scene",
        arg(&scene),
        "--pred",
        arg(&dir.path().join("pred.json")),
        "--out",
        arg(&svg_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert!(paths_with_stroke(&doc, "red").is_empty());
    assert_eq!(paths_with_stroke(&doc, "green").len(), 6);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tpcn"));
        cmd.args(["gen-synthetic", "--out", arg(&dir.path().join(sub)), "--n", "1"]);
        match env {
            Some(v) => cmd.env("TPCN_SEED", v),
            None => cmd.env_remove("TPCN_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.path().join(sub).join("scene_0000.json")).unwrap()
    };
    gen(&dir.path().join("explicit"), 1, 17, "mixed");
    let explicit = fs::read(dir.path().join("explicit/scene_0000.json")).unwrap();
    assert_eq!(run("env", Some("17")), explicit);
    assert_ne!(run("zero", None), explicit);
    let bad = Command::new(env!("CARGO_BIN_EXE_tpcn"))
        .args(["gen-synthetic", "--out", arg(&dir.path().join("bad")), "--n", "1"])
        .env("TPCN_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
