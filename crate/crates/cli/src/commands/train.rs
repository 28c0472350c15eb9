use advdet::model::{save_checkpoint, save_segmenter_checkpoint, train_head, train_segmenter_head, Phase, TrainOutcome};
use advdet::nn::Backbone;
use advdet::rng::stage_seed;
use advdet::{ClassifierModel, EpochLogRow, SegmenterModel};
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, Select, Task};
use crate::data::{check_class_names, load_split};
use crate::error::{CliError, CliResult};
use crate::manifest::ArtifactKind;
use crate::plot::{line_chart, Series};
use crate::run::{RunContext, CHECKPOINT_BEST, CHECKPOINT_LAST, CHECKPOINT_SLICED};

#[derive(Debug, Serialize)]
struct TrainSummary {
    task: Task,
    backbone: String,
    epochs: usize,
    train_images: usize,
    val_images: usize,
    class_names: Vec<String>,
    best_epoch: Option<usize>,
    best_val_accuracy: Option<f64>,
    final_train_accuracy: Option<f64>,
    backbone_checksum: String,
}

fn last_accuracy(log: &[EpochLogRow], phase: Phase) -> Option<f64> {
    log.iter().rev().find(|r| r.phase == phase).map(|r| r.accuracy)
}

fn series(log: &[EpochLogRow], phase: Phase, name: &str, f: fn(&EpochLogRow) -> f64) -> Series {
    Series {
        name: name.into(),
        points: log.iter().filter(|r| r.phase == phase).map(|r| (r.epoch as f64, f(r))).collect(),
    }
}

fn check_backbone(before: &str, after: &str) -> CliResult<()> {
    if before != after {
        return Err(CliError::Validation(format!(
            "backbone weights changed during training ({before} -> {after})"
        )));
    }
    Ok(())
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let mut ctx = RunContext::start(cfg, "train")?;
    let g = cfg.experiment.global_seed;
    let train = load_split(cfg, &cfg.dataset.train_split, true)?;
    let val = load_split(cfg, &cfg.dataset.val_split, false)?;
    check_class_names(&train, &val)?;
    if train.class_names.len() > cfg.train.num_classes {
        return Err(CliError::Validation(format!(
            "dataset has {} classes but train.num_classes is {}",
            train.class_names.len(),
            cfg.train.num_classes
        )));
    }

    let backbone = Backbone::new(cfg.model.backbone_spec(), stage_seed(g, "backbone/init"))?;
    let checksum = backbone.checksum();
    let norm = cfg.preprocess.norm()?;
    let aug = cfg.preprocess.train_spec(stage_seed(g, "train/augment"));
    let tc = cfg.train.to_train_config(stage_seed(g, "train/shuffle"));
    let head_seed = stage_seed(g, "train/head_init");
    let (k, crop) = (cfg.model.head_classes, cfg.preprocess.crop_size);
    info!(
        "training {} head ({} classes) on {} images for {} epochs",
        cfg.model.backbone,
        k,
        train.samples.len(),
        tc.epochs
    );

    let (log, best_epoch, best_acc) = match cfg.experiment.task {
        Task::Classification => {
            let model = ClassifierModel::new(backbone, k, crop, norm, head_seed)?;
            let TrainOutcome { model: last, best, log } = train_head(&model, &train.samples, &val.samples, &tc, &aug)?;
            check_backbone(&checksum, &last.backbone.checksum())?;
            let (best_epoch, best_acc) = (best.as_ref().map(|b| b.epoch), best.as_ref().map(|b| b.val_accuracy));
            let best = best.map(|b| b.model).unwrap_or_else(|| last.clone());
            save_checkpoint(&last, ctx.path(CHECKPOINT_LAST))?;
            save_checkpoint(&best, ctx.path(CHECKPOINT_BEST))?;
            ctx.register(CHECKPOINT_LAST, ArtifactKind::Checkpoint);
            ctx.register(CHECKPOINT_BEST, ArtifactKind::Checkpoint);
            if k >= 2 {
                let selected = match cfg.train.select {
                    Select::Best => &best,
                    Select::Last => &last,
                };
                save_checkpoint(&selected.slice_head()?, ctx.path(CHECKPOINT_SLICED))?;
                ctx.register(CHECKPOINT_SLICED, ArtifactKind::Checkpoint);
            }
            (log, best_epoch, best_acc)
        }
        Task::Segmentation => {
            let mut model = SegmenterModel::new(backbone, k, crop, norm, head_seed)?;
            model.ignore_value = cfg.dataset.ignore_value;
            let TrainOutcome { model: last, best, log } =
                train_segmenter_head(&model, &train.samples, &val.samples, &tc, &aug)?;
            check_backbone(&checksum, &last.backbone.checksum())?;
            let (best_epoch, best_acc) = (best.as_ref().map(|b| b.epoch), best.as_ref().map(|b| b.val_accuracy));
            let best = best.map(|b| b.model).unwrap_or_else(|| last.clone());
            save_segmenter_checkpoint(&last, ctx.path(CHECKPOINT_LAST))?;
            save_segmenter_checkpoint(&best, ctx.path(CHECKPOINT_BEST))?;
            ctx.register(CHECKPOINT_LAST, ArtifactKind::Checkpoint);
            ctx.register(CHECKPOINT_BEST, ArtifactKind::Checkpoint);
            (log, best_epoch, best_acc)
        }
    };
    if let Some(r) = log.last() {
        info!("epoch {}: {} loss {:.4} accuracy {:.4}", r.epoch, r.phase, r.loss, r.accuracy);
    }

    ctx.write_with("epoch_log.csv", ArtifactKind::EpochLogCsv, |w| EpochLogRow::write_csv(&log, w))?;
    let (_, svg) = ctx.artifact("training.svg", ArtifactKind::Plot);
    line_chart(
        &svg,
        "Training curves",
        "epoch",
        "value",
        &[
            series(&log, Phase::Train, "train loss", |r| r.loss),
            series(&log, Phase::Val, "val loss", |r| r.loss),
            series(&log, Phase::Train, "train accuracy", |r| r.accuracy),
            series(&log, Phase::Val, "val accuracy", |r| r.accuracy),
        ],
    )?;
    let summary = TrainSummary {
        task: cfg.experiment.task,
        backbone: cfg.model.backbone.to_string(),
        epochs: cfg.train.epochs,
        train_images: train.samples.len(),
        val_images: val.samples.len(),
        class_names: train.class_names.clone(),
        best_epoch,
        best_val_accuracy: best_acc,
        final_train_accuracy: last_accuracy(&log, Phase::Train),
        backbone_checksum: checksum,
    };
    ctx.write_json("train_summary.json", &summary)?;
    ctx.finish()?;
    Ok(())
}
