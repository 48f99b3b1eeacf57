//! The `dilseg` binary end to end: synth, train, eval, and exit codes.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dilseg::cli::{cmd_eval, evaluate, predict_labels, RunConfig};
use dilseg::data::DatasetManifest;
use dilseg::network::{build_mini_fcrn, forward, load_checkpoint, Mode};
use dilseg::resolution::apply_surgery;

const CONFIG: &str = r#"
seed = 5
out_dir = "run"

[synth]
train_count = 8
val_count = 4
size = 32
num_classes = 3

[network]
stage_widths = [4, 6]
blocks_per_stage = [1, 1]
num_classes = 3
classifier_kernel = 3
classifier_dilation = 2
output_stride = 8

[optim]
lr = 0.02
steps = 15

[loss]
threshold = 0.7
min_keep = 8

[data]
train_manifest = "data/train/manifest.txt"
val_manifest = "data/val/manifest.txt"
crop = 24

[stitch]
ratio = 2
test = true
"#;

fn dilseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dilseg")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A temp dir holding `run.toml` and a generated dataset under `data/`.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dilseg(&["synth", "--config", path(&cfg), "--out", path(&dir.path().join("data"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir, cfg)
}

fn report_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_train_eval_pipeline() {
    let (dir, cfg) = workspace();
    let run = dir.path().join("run");
    let out = dilseg(&["train", "--config", path(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 15 + 2);
    for (i, r) in records[..15].iter().enumerate() {
        assert_eq!(r["step"], i);
        assert!(r["selected"].as_u64().unwrap() > 0);
        assert!(r["loss"].as_f64().unwrap() > 0.0);
        assert_eq!(r["lr"], 0.02);
    }
    assert_eq!(records[15]["final"], "train");
    assert_eq!(records[16]["final"], "val");

    // Predict-then-evaluate on the training set reproduces the logged metrics.
    let ckpt = run.join("checkpoint");
    let train_manifest = dir.path().join("data/train/manifest.txt");
    let out = dilseg(&["eval", "--checkpoint", path(&ckpt), "--manifest", path(&train_manifest), "--stitch-ratio", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["pixel_acc", "mean_acc", "mean_iou"] {
        let logged = records[15][key].as_f64().unwrap();
        assert!((report_value(&text, key) - logged).abs() <= 5e-5, "{key}");
    }
    let exact = cmd_eval(&ckpt, &train_manifest, 2).unwrap();
    assert_eq!(exact.scores.mean_iou, records[15]["mean_iou"].as_f64().unwrap());
    assert_eq!(report_value(&text, "images"), 8.0);
    assert!(text.contains("class_2_iou="));
}

#[test]
fn eval_ratio_one_is_plain_and_ratio_two_matches_surgery() {
    let (dir, cfg) = workspace();
    let mut config = RunConfig::load(&cfg).unwrap();
    config.network.as_mut().unwrap().init_seed = 3;
    let net = build_mini_fcrn(config.network.as_ref().unwrap()).unwrap();
    let manifest = DatasetManifest::read(dir.path().join("data/val/manifest.txt")).unwrap();
    let high = apply_surgery(&net, 4).unwrap();
    for i in 0..manifest.records.len() {
        let sample = manifest.load(i).unwrap();
        let plain = forward(&net, &sample.image, Mode::Eval).unwrap().0;
        let direct_high = forward(&high, &sample.image, Mode::Eval).unwrap().0;
        let stitched = dilseg::resolution::stitched_forward(
            &net,
            &sample.image,
            &dilseg::resolution::StitchConfig::new(&net, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(stitched, plain);
        let r2 = dilseg::resolution::stitched_forward(
            &net,
            &sample.image,
            &dilseg::resolution::StitchConfig::new(&net, 2).unwrap(),
        )
        .unwrap();
        assert!(r2.max_abs_diff(&direct_high) < 1e-5);
        assert_eq!(predict_labels(&net, &sample.image, 2).unwrap(), predict_labels(&high, &sample.image, 1).unwrap());
    }
    assert_eq!(evaluate(&net, &manifest, 2).unwrap(), evaluate(&high, &manifest, 1).unwrap());
}

#[test]
fn zero_steps_saves_the_initialization() {
    let (dir, cfg) = workspace();
    let out = dilseg(&["train", "--config", path(&cfg), "--steps", "0", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (saved, ckpt) = load_checkpoint(dir.path().join("run/checkpoint")).unwrap();
    let mut config = RunConfig::load(&cfg).unwrap();
    config.network.as_mut().unwrap().init_seed = 9;
    let mut init = build_mini_fcrn(config.network.as_ref().unwrap()).unwrap();
    init.round_params_to_f32();
    assert_eq!(saved, init);
    assert_eq!(ckpt.hyperparameters["seed"], 9);
    let log = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"final\"")));
}

#[test]
fn flags_override_the_config() {
    let (dir, cfg) = workspace();
    let out = dilseg(&[
        "train",
        "--config",
        path(&cfg),
        "--steps",
        "2",
        "--out",
        path(&dir.path().join("other")),
        "--loss.threshold",
        "0.5",
        "--loss.min-keep",
        "3",
        "--stitch-ratio",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, ckpt) = load_checkpoint(dir.path().join("other/checkpoint")).unwrap();
    let h = &ckpt.hyperparameters;
    assert_eq!(h["optim"]["steps"], 2);
    assert_eq!(h["loss"]["threshold"], 0.5);
    assert_eq!(h["loss"]["min_keep"], 3);
    assert_eq!(h["stitch"]["ratio"], 4);
    assert!(!dir.path().join("run").exists());
}

#[test]
fn validation_errors_exit_one_and_list_every_field() {
    let (dir, cfg) = workspace();
    let bad = fs::read_to_string(&cfg)
        .unwrap()
        .replace("lr = 0.02", "lr = -1.0")
        .replace("crop = 24", "crop = 0")
        .replace("ratio = 2", "ratio = 3");
    let bad_cfg = dir.path().join("bad.toml");
    fs::write(&bad_cfg, bad).unwrap();
    let out = dilseg(&["train", "--config", path(&bad_cfg), "--loss.threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["optim.lr", "data.crop", "stitch.ratio", "loss.threshold"] {
        assert!(err.contains(field), "{field} missing from {err}");
    }

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, CONFIG.replace("seed = 5", "seed = 5\nsede = 6")).unwrap();
    assert_eq!(dilseg(&["train", "--config", path(&unknown)]).status.code(), Some(1));
    assert_eq!(dilseg(&["train", "--config", path(&dir.path().join("absent.toml"))]).status.code(), Some(2));
    assert_eq!(dilseg(&["train"]).status.code(), Some(1));
}

#[test]
fn eval_rejects_class_mismatch() {
    let (dir, cfg) = workspace();
    assert!(dilseg(&["train", "--config", path(&cfg), "--steps", "1"]).status.success());
    let other = dir.path().join("four");
    dilseg::data::synth_generate(
        &dilseg::data::SynthConfig {
            count: 1,
            size: 16,
            num_classes: 4,
            rare_fraction: 0.1,
            seed: 1,
        },
        &other,
    )
    .unwrap();
    let out = dilseg(&[
        "eval",
        "--checkpoint",
        path(&dir.path().join("run/checkpoint")),
        "--manifest",
        path(&other.join("manifest.txt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn stitch_check_and_fov_table_commands() {
    let out = dilseg(&["stitch-check", "--seed", "123", "--instances", "5"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(report_value(&text, "forward_max_abs") < 1e-5);
    assert!(report_value(&text, "gradient_max_rel") < 1e-5);

    let out = dilseg(&["fov-table", "--resolutions", "4,8", "--kernels", "3", "--dilations", "2"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("1/4") && text.lines().last().unwrap().ends_with("40"));
    assert_eq!(dilseg(&["fov-table", "--kernels", "0"]).status.code(), Some(1));
}
