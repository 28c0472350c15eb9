mod common;

use std::fs;
use std::io::BufReader;

use advdet::attack::read_sweep_csv;
use advdet::model::load_checkpoint;
use advdet::nn::Backbone;
use advdet::rng::stage_seed;
use advdet::{ClassifierModel, EpochLogRow};
use advdet_cli::config::ExperimentConfig;
use advdet_cli::manifest::sha256_file;
use advdet_cli::plot::{line_chart, Series};
use common::*;

#[test]
fn reference_table_parses_and_renders() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference_sweep.csv");
    let rows = read_sweep_csv(BufReader::new(fs::File::open(path).unwrap())).unwrap();
    assert_eq!(rows.len(), 9);
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    assert_eq!(eps, PAPER_GRID);
    assert!(rows[0].values().iter().all(|v| *v == Some(1.0)));
    let miou: Vec<f64> = rows.iter().map(|r| r.miou.unwrap()).collect();
    assert!(degrades(&miou, 0.02, 0.6));
    assert_eq!(rows[8].values(), [Some(0.49), Some(0.10), Some(0.49), Some(0.16), Some(0.10), Some(0.13)]);

    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("table.svg");
    let series = vec![Series {
        name: "mIoU".into(),
        points: rows.iter().map(|r| (r.epsilon, r.miou.unwrap())).collect(),
    }];
    line_chart(&svg, "reference", "epsilon", "score", &series).unwrap();
    assert!(fs::read_to_string(&svg).unwrap().contains("mIoU"));
}

#[test]
fn zero_epochs_keeps_the_initial_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &small_synth(), 1);
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &classification_config(&data, &out, "[train]\nepochs = 0\n").replace("[train]\nepochs = 20\n", ""));
    let r = advdet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));

    let log = fs::read_to_string(out.join("train/epoch_log.csv")).unwrap();
    assert_eq!(log.trim(), EpochLogRow::CSV_HEADER);

    let parsed = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    let g = parsed.experiment.global_seed;
    let backbone = Backbone::new(parsed.model.backbone_spec(), stage_seed(g, "backbone/init")).unwrap();
    let init = ClassifierModel::new(
        backbone,
        parsed.model.head_classes,
        parsed.preprocess.crop_size,
        parsed.preprocess.norm().unwrap(),
        stage_seed(g, "train/head_init"),
    )
    .unwrap();
    for name in ["checkpoint_last.ckpt", "checkpoint_best.ckpt"] {
        let m = load_checkpoint(out.join("train").join(name)).unwrap();
        let expect: Vec<f64> = init.head.weight.iter().map(|&w| w as f32 as f64).collect();
        assert_eq!(m.head.weight, expect, "{name}");
        assert_eq!(m.backbone.checksum(), init.backbone.checksum());
    }
}

#[test]
fn training_is_deterministic_and_overfits_ten_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &small_synth(), 2);
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let text = classification_config(&data, &out, "").replace("epochs = 20", "epochs = 30\nlearning_rate = 0.01");
        let cfg = write_config(dir.path(), &format!("{run}.toml"), &text);
        let r = advdet(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        logs.push(fs::read_to_string(out.join("train/epoch_log.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let rows = EpochLogRow::read_csv(logs[0].as_bytes()).unwrap();
    let last_train = rows.iter().rev().find(|r| r.phase.to_string() == "train").unwrap();
    assert_eq!(last_train.epoch, 30);
    assert_eq!(last_train.accuracy, 1.0, "{last_train:?}");
}

#[test]
fn sweep_without_checkpoint_names_the_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &small_synth(), 3);
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &classification_config(&data, &out, ""));
    let r = advdet(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("checkpoint_best.ckpt"), "{}", stderr(&r));
}

#[test]
fn malformed_dataset_lists_offending_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &small_synth(), 4);
    let stray = data.join("classification/train/stray.png");
    fs::write(&stray, b"not a png").unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &classification_config(&data, &out, ""));
    let r = advdet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 1, "{}", stderr(&r));
    assert!(stderr(&r).contains("stray.png"), "{}", stderr(&r));
}

#[test]
fn missing_dataset_and_bad_config_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &classification_config(&dir.path().join("nowhere"), &out, ""));
    assert_eq!(code(&advdet(&["train", "--config", cfg.to_str().unwrap()])), 2);
    let bad = write_config(dir.path(), "bad.toml", "[train]\nlearnign_rate = 1\n");
    let r = advdet(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("learnign_rate"));
    assert_eq!(code(&advdet(&["train", "--config", "/nonexistent.toml"])), 2);
}

#[test]
fn run_directory_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &small_synth(), 5);
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &classification_config(&data, &out, ""));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&advdet(&["train", "--config", c])), 0);
    let r = advdet(&["sweep", "--config", c, "--seed", "9"]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("different config"));
}

#[test]
fn zero_grid_sweep_and_detect_leave_checkpoint_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &small_synth(), 6);
    let out = dir.path().join("run");
    let extra = "[attack]\nepsilons = [0.0]\n\n[detector]\nepsilons = [0.0]\n";
    let cfg = write_config(dir.path(), "c.toml", &classification_config(&data, &out, extra));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&advdet(&["train", "--config", c])), 0);
    let ckpt = out.join("train/checkpoint_best.ckpt");
    let before = sha256_file(&ckpt).unwrap();

    let r = advdet(&["sweep", "--config", c]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = fs::read_to_string(out.join("sweep/sweep.csv")).unwrap();
    let rows = read_sweep_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].values().iter().all(|v| *v == Some(1.0)));

    let r = advdet(&["detect", "--config", c]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(sha256_file(&ckpt).unwrap(), before);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("detect/detect_summary.json")).unwrap()).unwrap();
    for m in ["confidence", "non_me", "k_density"] {
        assert_eq!(summary["epsilons"][0]["auroc"][m], 0.5);
    }
    let lines = fs::read_to_string(out.join("detect/detections.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["path", "predicted_class", "confidence", "non_me", "k_density", "verdict", "margin", "source", "unknown_class"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(code(&advdet(&["verify", "--output", out.to_str().unwrap()])), 0);
}

#[test]
fn tiny_calibration_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth_cfg = advdet::synth::SynthConfig {
        val_per_class: 4,
        ..small_synth()
    };
    synth(&data, &synth_cfg, 7);
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.toml", &classification_config(&data, &out, "[detector]\nepsilons = [0.0]\n"));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&advdet(&["train", "--config", c])), 0);
    let r = advdet(&["detect", "--config", c]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("calibration"), "{}", stderr(&r));
}

#[test]
fn make_dataset_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "[synthetic]\nnum_classes = 2\nimage_size = 12\ntrain_per_class = 2\nval_per_class = 1\ntest_per_class = 1\n",
    );
    let mut hashes = Vec::new();
    for (name, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        let out = dir.path().join(name);
        let r = advdet(&["make-dataset", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        let img = out.join("classification/train/00_circle/0000.png");
        hashes.push(sha256_file(&img).unwrap());
        assert!(out.join("segmentation/test/masks").is_dir());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);
}
