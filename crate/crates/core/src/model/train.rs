use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::segmenter::pixel_ce_grad;
use super::{argmax, softmax, ClassifierModel, EpochLogRow, LinearHead, Phase, SegmenterModel};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, LabelMap};
use crate::nn::gemm::{gemm, View};
use crate::nn::Tensor;
use crate::pipeline::{preprocess, preprocess_pair, AugmentMode, AugmentSpec, RawImage};
use crate::rng::{item_seed, rng_from_seed};

/// Head-training recipe. Defaults: lr 0.001, momentum 0.9, batch 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Labels must lie below this bound; the head may be wider.
    pub num_classes: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 4,
            epochs: 10,
            num_classes: 100,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, head_classes: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "bad optimizer settings lr={} momentum={} batch={}",
                self.learning_rate, self.momentum, self.batch_size
            )));
        }
        if self.num_classes == 0 || self.num_classes > head_classes {
            return Err(Error::InvalidConfig(format!(
                "num_classes {} must be in 1..={head_classes} (head width)",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Classical (heavy-ball) momentum SGD: `v = m*v + g; w -= lr*v`.
///
/// Parameters are kept at single precision after every step so a saved
/// checkpoint reproduces the in-memory head exactly.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity_w: Vec<f64>,
    velocity_b: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(head: &LinearHead, lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity_w: vec![0.0; head.weight.len()],
            velocity_b: vec![0.0; head.bias.len()],
        }
    }

    pub fn step(&mut self, head: &mut LinearHead, grad_w: &[f64], grad_b: &[f64]) {
        let (lr, m) = (self.lr, self.momentum);
        for ((w, v), g) in head.weight.iter_mut().zip(&mut self.velocity_w).zip(grad_w) {
            *v = m * *v + g;
            *w = f64::from((*w - lr * *v) as f32);
        }
        for ((b, v), g) in head.bias.iter_mut().zip(&mut self.velocity_b).zip(grad_b) {
            *v = m * *v + g;
            *b = f64::from((*b - lr * *v) as f32);
        }
    }
}

/// Softmax cross-entropy for one feature vector: loss, weight gradient
/// `(p - onehot(y)) z^T`, bias gradient `p - onehot(y)`, probabilities.
pub fn head_gradient(head: &LinearHead, z: &[f64], label: usize) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = softmax(&head.logits(z));
    let loss = -p[label].ln();
    let mut gb = p.clone();
    gb[label] -= 1.0;
    let mut gw = Vec::with_capacity(head.weight.len());
    for g in &gb {
        gw.extend(z.iter().map(|x| g * x));
    }
    (loss, gw, gb, p)
}

/// Result of a training run: the last-epoch model, the best validation
/// model (when a validation set was given), and the epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub best: Option<BestModel<M>>,
    pub log: Vec<EpochLogRow>,
}

#[derive(Debug, Clone)]
pub struct BestModel<M> {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub model: M,
}

fn log_row(epoch: usize, phase: Phase, loss: f64, cm: &ConfusionMatrix) -> EpochLogRow {
    EpochLogRow {
        epoch,
        phase,
        loss,
        accuracy: cm.pixel_accuracy().unwrap_or(0.0),
        precision_macro: cm.macro_precision().unwrap_or(0.0),
        recall_macro: cm.macro_recall().unwrap_or(0.0),
        f1_macro: cm.dice_f1().unwrap_or(0.0),
    }
}

fn sample_label(img: &RawImage, num_classes: usize) -> Result<usize> {
    let label = img.label.ok_or_else(|| Error::MissingLabel {
        path: img.source_path.clone(),
    })?;
    if label >= num_classes {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes,
            path: img.source_path.clone(),
        });
    }
    Ok(label)
}

fn eval_spec(aug: &AugmentSpec) -> AugmentSpec {
    AugmentSpec {
        mode: AugmentMode::Eval,
        ..aug.clone()
    }
}

/// Augmentation seed of sample `index` in `epoch`.
fn sample_spec(aug: &AugmentSpec, epoch: usize, index: usize) -> AugmentSpec {
    aug.with_seed(item_seed(item_seed(aug.rng_seed, epoch as u64), index as u64))
}

fn epoch_order(cfg: &TrainConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(item_seed(cfg.rng_seed, epoch as u64)));
    order
}

/// Trains only the linear head with softmax cross-entropy and momentum SGD.
///
/// Train-phase features are recomputed every epoch under `aug` (train-mode
/// augmentation is seeded per epoch and sample); validation always uses
/// eval-mode pre-processing.
pub fn train_head(
    model: &ClassifierModel,
    train: &[RawImage],
    val: &[RawImage],
    cfg: &TrainConfig,
    aug: &AugmentSpec,
) -> Result<TrainOutcome<ClassifierModel>> {
    if !model.backbone_frozen {
        return Err(Error::InvalidConfig("only frozen-backbone training is supported".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(model.num_classes())?;
    let train_labels = train.iter().map(|s| sample_label(s, cfg.num_classes)).collect::<Result<Vec<_>>>()?;
    let val_labels = val.iter().map(|s| sample_label(s, cfg.num_classes)).collect::<Result<Vec<_>>>()?;

    let features = |imgs: &[RawImage], spec: &(dyn Fn(usize) -> AugmentSpec + Sync)| -> Result<Vec<Vec<f64>>> {
        imgs.par_iter()
            .enumerate()
            .map(|(i, img)| Ok(model.features(&preprocess(img, &spec(i), &model.norm)?)?.z))
            .collect()
    };
    let eval = eval_spec(aug);
    let val_feats = features(val, &|_| eval.clone())?;
    let fixed_train = if aug.mode == AugmentMode::Eval {
        Some(features(train, &|_| eval.clone())?)
    } else {
        None
    };

    let k = model.num_classes();
    let mut current = model.clone();
    current.train_config = Some(cfg.clone());
    let mut sgd = SgdMomentum::new(&current.head, cfg.learning_rate, cfg.momentum);
    let mut log = Vec::new();
    let mut best: Option<BestModel<ClassifierModel>> = None;

    for epoch in 1..=cfg.epochs {
        let fresh;
        let feats = match &fixed_train {
            Some(f) => f,
            None => {
                fresh = features(train, &|i| sample_spec(aug, epoch, i))?;
                &fresh
            }
        };
        let mut cm = ConfusionMatrix::new(k);
        let mut loss_sum = 0.0;
        for batch in epoch_order(cfg, epoch, train.len()).chunks(cfg.batch_size) {
            let mut gw = vec![0.0; current.head.weight.len()];
            let mut gb = vec![0.0; k];
            for &i in batch {
                let (loss, w, b, p) = head_gradient(&current.head, &feats[i], train_labels[i]);
                loss_sum += loss;
                cm.add(train_labels[i], argmax(&p))?;
                gw.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                gb.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
            }
            let scale = 1.0 / batch.len() as f64;
            gw.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= scale);
            sgd.step(&mut current.head, &gw, &gb);
        }
        log.push(log_row(epoch, Phase::Train, loss_sum / train.len() as f64, &cm));

        if !val.is_empty() {
            let mut cm = ConfusionMatrix::new(k);
            let mut loss_sum = 0.0;
            for (z, &y) in val_feats.iter().zip(&val_labels) {
                let p = softmax(&current.head.logits(z));
                loss_sum -= p[y].ln();
                cm.add(y, argmax(&p))?;
            }
            let row = log_row(epoch, Phase::Val, loss_sum / val.len() as f64, &cm);
            if best.as_ref().is_none_or(|b| row.accuracy > b.val_accuracy) {
                best = Some(BestModel {
                    epoch,
                    val_accuracy: row.accuracy,
                    model: current.clone(),
                });
            }
            log.push(row);
        }
    }
    Ok(TrainOutcome {
        model: current,
        best,
        log,
    })
}

/// Per-image dense gradient: loss, `G F^T`, row sums of `G`, predicted map.
fn dense_head_gradient(head: &LinearHead, fmap: &Tensor, target: &LabelMap) -> Result<(f64, Vec<f64>, Vec<f64>, LabelMap)> {
    let logits = head.as_pointwise().forward(fmap);
    let (g, loss) = pixel_ce_grad(&logits, target)?;
    let (k, d, n) = (head.num_classes, head.feature_dim, fmap.plane());
    let mut gw = vec![0.0; k * d];
    gemm(k, n, d, View::rows(&g.data, n), View::transposed(&fmap.data, n), 0.0, &mut gw);
    let gb = g.data.chunks(n).map(|row| row.iter().sum()).collect();
    let pred = super::segmenter::argmax_map(&logits, target.ignore_value);
    Ok((loss, gw, gb, pred))
}

/// Dense counterpart of [`train_head`]: per-pixel cross-entropy over
/// non-ignore pixels, one loss term per image.
pub fn train_segmenter_head(
    model: &SegmenterModel,
    train: &[RawImage],
    val: &[RawImage],
    cfg: &TrainConfig,
    aug: &AugmentSpec,
) -> Result<TrainOutcome<SegmenterModel>> {
    if !model.backbone_frozen {
        return Err(Error::InvalidConfig("only frozen-backbone training is supported".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(model.num_classes())?;
    for img in train.iter().chain(val) {
        let map = img.label_map.as_ref().ok_or_else(|| Error::MissingLabel {
            path: img.source_path.clone(),
        })?;
        if let Some(&bad) = map
            .labels
            .iter()
            .find(|&&l| l != map.ignore_value && l as usize >= cfg.num_classes)
        {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_classes: cfg.num_classes,
                path: img.source_path.clone(),
            });
        }
    }
    let k = model.num_classes();
    let prepare = |imgs: &[RawImage], spec: &(dyn Fn(usize) -> AugmentSpec + Sync)| -> Result<Vec<(Tensor, LabelMap)>> {
        imgs.par_iter()
            .enumerate()
            .map(|(i, img)| {
                let (x, mut map) = preprocess_pair(img, &spec(i), &model.norm)?;
                map.num_classes = k;
                Ok((model.feature_map(&x)?, map))
            })
            .collect()
    };
    let eval = eval_spec(aug);
    let val_data = prepare(val, &|_| eval.clone())?;
    let fixed_train = if aug.mode == AugmentMode::Eval {
        Some(prepare(train, &|_| eval.clone())?)
    } else {
        None
    };

    let mut current = model.clone();
    current.train_config = Some(cfg.clone());
    let mut sgd = SgdMomentum::new(&current.head, cfg.learning_rate, cfg.momentum);
    let mut log = Vec::new();
    let mut best: Option<BestModel<SegmenterModel>> = None;

    for epoch in 1..=cfg.epochs {
        let fresh;
        let data = match &fixed_train {
            Some(d) => d,
            None => {
                fresh = prepare(train, &|i| sample_spec(aug, epoch, i))?;
                &fresh
            }
        };
        let mut cm = ConfusionMatrix::new(k);
        let mut loss_sum = 0.0;
        for batch in epoch_order(cfg, epoch, train.len()).chunks(cfg.batch_size) {
            let grads = batch
                .par_iter()
                .map(|&i| dense_head_gradient(&current.head, &data[i].0, &data[i].1))
                .collect::<Result<Vec<_>>>()?;
            let mut gw = vec![0.0; current.head.weight.len()];
            let mut gb = vec![0.0; k];
            for (&i, (loss, w, b, pred)) in batch.iter().zip(grads) {
                loss_sum += loss;
                cm.accumulate(&pred, &data[i].1)?;
                gw.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                gb.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
            }
            let scale = 1.0 / batch.len() as f64;
            gw.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= scale);
            sgd.step(&mut current.head, &gw, &gb);
        }
        log.push(log_row(epoch, Phase::Train, loss_sum / train.len() as f64, &cm));

        if !val.is_empty() {
            let results = val_data
                .par_iter()
                .map(|(f, m)| dense_head_gradient(&current.head, f, m))
                .collect::<Result<Vec<_>>>()?;
            let mut cm = ConfusionMatrix::new(k);
            let mut loss_sum = 0.0;
            for ((loss, _, _, pred), (_, map)) in results.iter().zip(&val_data) {
                loss_sum += loss;
                cm.accumulate(pred, map)?;
            }
            let row = log_row(epoch, Phase::Val, loss_sum / val.len() as f64, &cm);
            if best.as_ref().is_none_or(|b| row.accuracy > b.val_accuracy) {
                best = Some(BestModel {
                    epoch,
                    val_accuracy: row.accuracy,
                    model: current.clone(),
                });
            }
            log.push(row);
        }
    }
    Ok(TrainOutcome {
        model: current,
        best,
        log,
    })
}
