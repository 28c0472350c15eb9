//! Dataset loading and pre-processing for the subcommands.

use std::path::Path;

use advdet::attack::SweepSample;
use advdet::pipeline::{load_classification_dir, load_segmentation_dir, preprocess, preprocess_pair};
use advdet::{AugmentSpec, LabelMap, NormSpec, RawImage, TensorImage};
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Task};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct Split {
    pub name: String,
    pub class_names: Vec<String>,
    pub samples: Vec<RawImage>,
}

/// Loads one split. A missing optional split yields an empty set.
pub fn load_split(cfg: &ExperimentConfig, split: &str, required: bool) -> CliResult<Split> {
    let dir = cfg.split_dir(split);
    if !dir.is_dir() {
        if required {
            return Err(CliError::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("split {split:?} not found")),
            ));
        }
        warn!("split {split:?} not found at {}; treating it as empty", dir.display());
        return Ok(Split {
            name: split.into(),
            class_names: Vec::new(),
            samples: Vec::new(),
        });
    }
    let (class_names, samples) = match cfg.experiment.task {
        Task::Classification => {
            let set = load_classification_dir(&dir)?;
            (set.class_names, set.samples)
        }
        Task::Segmentation => (
            Vec::new(),
            load_segmentation_dir(&dir, cfg.model.head_classes, cfg.dataset.ignore_value)?,
        ),
    };
    info!("loaded {} images from {}", samples.len(), dir.display());
    Ok(Split {
        name: split.into(),
        class_names,
        samples,
    })
}

/// Class-name tables must agree across splits, or ids mean different
/// things.
pub fn check_class_names(a: &Split, b: &Split) -> CliResult<()> {
    if a.class_names.is_empty() || b.class_names.is_empty() || a.class_names == b.class_names {
        return Ok(());
    }
    Err(CliError::Validation(format!(
        "class directories differ between splits {:?} ({:?}) and {:?} ({:?})",
        a.name, a.class_names, b.name, b.class_names
    )))
}

/// `max` evenly spaced items (all of them when `max` is absent or larger).
pub fn subsample<T: Clone>(items: &[T], max: Option<usize>) -> Vec<T> {
    match max {
        Some(m) if m < items.len() => (0..m).map(|i| items[i * items.len() / m].clone()).collect(),
        _ => items.to_vec(),
    }
}

pub fn eval_tensors(samples: &[RawImage], spec: &AugmentSpec, norm: &NormSpec) -> CliResult<Vec<TensorImage>> {
    Ok(samples
        .par_iter()
        .map(|s| preprocess(s, spec, norm))
        .collect::<advdet::Result<Vec<_>>>()?)
}

/// Eval-mode tensors plus the label map each prediction is scored against.
pub fn sweep_samples(cfg: &ExperimentConfig, samples: &[RawImage], norm: &NormSpec) -> CliResult<Vec<SweepSample>> {
    let spec = cfg.preprocess.eval_spec();
    let k = cfg.model.head_classes;
    Ok(samples
        .par_iter()
        .map(|s| {
            let (image, truth) = match cfg.experiment.task {
                Task::Classification => {
                    let truth = s.label.map(|l| LabelMap::single(l as u32, k));
                    (preprocess(s, &spec, norm)?, truth)
                }
                Task::Segmentation => {
                    let (x, m) = preprocess_pair(s, &spec, norm)?;
                    (x, Some(m))
                }
            };
            Ok(SweepSample {
                path: s.source_path.clone(),
                image,
                truth,
            })
        })
        .collect::<advdet::Result<Vec<_>>>()?)
}

/// Path of `p` relative to `base`, `/`-separated, for stable records.
pub fn display_path(p: &str, base: &Path) -> String {
    Path::new(p)
        .strip_prefix(base)
        .map(|r| r.to_string_lossy().replace('\\', "/"))
        .unwrap_or_else(|_| p.to_string())
}
