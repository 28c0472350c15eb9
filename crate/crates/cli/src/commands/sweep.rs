use std::collections::BTreeSet;

use advdet::attack::{epsilon_sweep, write_sweep_csv, ImageRecord, SweepResult};
use advdet::metrics::ClassRow;
use advdet::MetricBundle;
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, Task};
use crate::data::{display_path, load_split, subsample, sweep_samples};
use crate::error::CliResult;
use crate::manifest::ArtifactKind;
use crate::plot::{image_grid, line_chart, Series, Tile};
use crate::run::{eps_tag, load_classifier, load_segmenter, RunContext};

#[derive(Serialize)]
struct EpsilonMetrics<'a> {
    epsilon: f64,
    #[serde(flatten)]
    bundle: &'a MetricBundle,
}

#[derive(Serialize)]
struct LostClasses<'a> {
    epsilon: f64,
    lost_classes: &'a BTreeSet<u32>,
}

const COLUMNS: [&str; 6] = ["pixel_acc", "mIoU", "PA", "mAcc", "mIoU_agg", "mF1"];

/// One row per kept example, one column per epsilon (the first is clean).
fn panel(result: &SweepResult) -> CliResult<Vec<Vec<Tile>>> {
    let n = result.examples.iter().map(Vec::len).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::new();
        for per_eps in &result.examples {
            let x = &per_eps[i].adversarial;
            row.push(Tile {
                height: x.height,
                width: x.width,
                rgb: x.to_rgb8()?,
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let mut ctx = RunContext::start(cfg, "sweep")?;
    let ckpt = ctx.selected_checkpoint();
    let sweep_cfg = cfg.sweep_config();
    let test = load_split(cfg, &cfg.dataset.test_split, true)?;
    let images = subsample(&test.samples, cfg.attack.max_images);

    let (result, samples) = match cfg.experiment.task {
        Task::Classification => {
            let model = load_classifier(&ckpt)?;
            let samples = sweep_samples(cfg, &images, &model.norm)?;
            info!("sweeping {} epsilons over {} images", sweep_cfg.epsilons.len(), samples.len());
            (epsilon_sweep(&model, &samples, &sweep_cfg)?, samples)
        }
        Task::Segmentation => {
            let model = load_segmenter(&ckpt)?;
            let samples = sweep_samples(cfg, &images, &model.norm)?;
            info!("sweeping {} epsilons over {} images", sweep_cfg.epsilons.len(), samples.len());
            (epsilon_sweep(&model, &samples, &sweep_cfg)?, samples)
        }
    };
    for r in &result.rows {
        info!("eps {:.3}: mIoU {:?} PA {:?}", r.epsilon, r.miou, r.pa);
    }

    ctx.write_with("sweep.csv", ArtifactKind::SweepCsv, |w| write_sweep_csv(&result.rows, w))?;
    let root = cfg.split_dir(&cfg.dataset.test_split);
    let records: Vec<ImageRecord> = result
        .records
        .iter()
        .map(|r| ImageRecord {
            path: display_path(&r.path, &root),
            ..r.clone()
        })
        .collect();
    ctx.write_jsonl("per_image.jsonl", &records)?;
    let eps = &sweep_cfg.epsilons;
    let lost: Vec<LostClasses> = eps
        .iter()
        .zip(&result.bundles)
        .map(|(&epsilon, b)| LostClasses {
            epsilon,
            lost_classes: &b.lost_classes,
        })
        .collect();
    ctx.write_json("lost_classes.json", &lost)?;
    let metrics: Vec<EpsilonMetrics> = eps
        .iter()
        .zip(&result.bundles)
        .map(|(&epsilon, bundle)| EpsilonMetrics { epsilon, bundle })
        .collect();
    ctx.write_json("metrics.json", &metrics)?;
    for (&e, rows) in eps.iter().zip(&result.per_class) {
        let name = format!("per_class_eps{}.csv", eps_tag(e));
        ctx.write_with(&name, ArtifactKind::PerClassCsv, |w| ClassRow::write_csv(rows, w))?;
    }

    let series: Vec<Series> = COLUMNS
        .iter()
        .enumerate()
        .map(|(i, name)| Series {
            name: (*name).into(),
            points: result
                .rows
                .iter()
                .filter_map(|r| r.values()[i].map(|v| (r.epsilon, v)))
                .collect(),
        })
        .collect();
    let (_, svg) = ctx.artifact("sweep.svg", ArtifactKind::Plot);
    line_chart(&svg, "Metrics under FGSM", "epsilon", "score", &series)?;
    if cfg.attack.panel_images > 0 && !samples.is_empty() {
        let (_, png) = ctx.artifact("panel.png", ArtifactKind::Image);
        image_grid(&png, &panel(&result)?, 2)?;
    }
    ctx.finish()?;
    Ok(())
}
