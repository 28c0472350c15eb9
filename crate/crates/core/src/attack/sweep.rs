use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fgsm, AttackSpec, AttackTarget, LossTarget};
use crate::error::{Error, Result};
use crate::metrics::{lost_classes, ClassRow, ConfusionMatrix, LabelMap, MetricBundle};
use crate::pipeline::TensorImage;

pub const SWEEP_CSV_HEADER: &str = "epsilon,pixel_acc,mIoU,PA,mAcc,mIoU_agg,mF1";

/// What the attacked predictions are scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The model's own clean predictions (the epsilon = 0 row is all ones).
    #[default]
    Predictions,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub loss_target: LossTarget,
    #[serde(default = "yes")]
    pub clamp: bool,
    #[serde(default)]
    pub baseline: Baseline,
    /// Adversarial images retained per epsilon for visual panels.
    #[serde(default)]
    pub keep_examples: usize,
}

fn yes() -> bool {
    true
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            epsilons: vec![0.0, 0.02, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10],
            loss_target: LossTarget::TrueLabel,
            clamp: true,
            baseline: Baseline::Predictions,
            keep_examples: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.epsilons;
        let sorted = e.windows(2).all(|w| w[0] < w[1]);
        if e.is_empty() || e[0] != 0.0 || !sorted || e.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEpsilonGrid(e.clone()));
        }
        Ok(())
    }
}

/// One pre-processed, normalized input with optional ground truth.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub path: String,
    pub image: TensorImage,
    pub truth: Option<LabelMap>,
}

/// One row of the degradation table. `pixel_acc` and `pa` are the same
/// quantity, kept as two columns for schema compatibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub pixel_acc: Option<f64>,
    pub miou: Option<f64>,
    pub pa: Option<f64>,
    pub macc: Option<f64>,
    pub miou_agg: Option<f64>,
    pub mf1: Option<f64>,
}

impl SweepRow {
    fn from_bundle(epsilon: f64, b: &MetricBundle) -> Self {
        SweepRow {
            epsilon,
            pixel_acc: b.pixel_acc,
            miou: b.miou,
            pa: b.pixel_acc,
            macc: b.macc,
            miou_agg: b.miou_agg,
            mf1: b.dice_f1,
        }
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.pixel_acc, self.miou, self.pa, self.macc, self.miou_agg, self.mf1]
    }
}

/// Per-image outcome at one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub epsilon: f64,
    pub index: usize,
    pub path: String,
    pub linf_achieved: f64,
    /// Any scored pixel differs from the clean prediction.
    pub flipped: bool,
    pub changed_fraction: f64,
    pub zero_gradient: bool,
}

#[derive(Debug, Clone)]
pub struct SweepExample {
    pub path: String,
    pub adversarial: TensorImage,
    pub prediction: LabelMap,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub bundles: Vec<MetricBundle>,
    pub per_class: Vec<Vec<ClassRow>>,
    pub records: Vec<ImageRecord>,
    /// Clean predictions, computed once.
    pub baseline: Vec<LabelMap>,
    /// Up to `keep_examples` adversarial inputs per epsilon.
    pub examples: Vec<Vec<SweepExample>>,
}

fn with_classes(map: &LabelMap, k: usize) -> LabelMap {
    LabelMap {
        num_classes: k,
        ..map.clone()
    }
}

/// Runs FGSM at every epsilon of the grid and scores the attacked
/// predictions against the configured baseline.
///
/// Clean predictions are computed once and serve both as the
/// [`Baseline::Predictions`] reference and as the reference for lost
/// classes. Under the predictions baseline, pixels marked ignore in the
/// ground truth (when present) stay excluded.
pub fn epsilon_sweep<M: AttackTarget + ?Sized>(model: &M, samples: &[SweepSample], cfg: &SweepConfig) -> Result<SweepResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let k = model.num_classes();
    let truths: Vec<Option<LabelMap>> = samples.iter().map(|s| s.truth.as_ref().map(|t| with_classes(t, k))).collect();

    let baseline: Vec<LabelMap> = samples
        .par_iter()
        .map(|s| model.predict_map(&s.image))
        .collect::<Result<_>>()?;
    let references: Vec<LabelMap> = baseline
        .iter()
        .zip(&truths)
        .zip(samples)
        .map(|((pred, truth), s)| match (cfg.baseline, truth) {
            (Baseline::GroundTruth, Some(t)) => Ok(t.clone()),
            (Baseline::GroundTruth, None) => Err(Error::MissingLabel { path: s.path.clone() }),
            (Baseline::Predictions, Some(t)) if t.labels.len() == pred.labels.len() => {
                let mut r = pred.clone();
                for (v, &tv) in r.labels.iter_mut().zip(&t.labels) {
                    if tv == t.ignore_value {
                        *v = r.ignore_value;
                    }
                }
                Ok(r)
            }
            (Baseline::Predictions, _) => Ok(pred.clone()),
        })
        .collect::<Result<_>>()?;

    let mut result = SweepResult {
        rows: Vec::new(),
        bundles: Vec::new(),
        per_class: Vec::new(),
        records: Vec::new(),
        baseline: baseline.clone(),
        examples: Vec::new(),
    };
    for &eps in &cfg.epsilons {
        let spec = AttackSpec {
            epsilon: eps,
            loss_target: cfg.loss_target,
            clamp: cfg.clamp,
            ..AttackSpec::fgsm(eps)
        };
        let outcomes: Vec<(Option<TensorImage>, LabelMap, f64, bool)> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                if eps == 0.0 {
                    return Ok((None, baseline[i].clone(), 0.0, false));
                }
                let pair = fgsm(model, &s.image, truths[i].as_ref(), &spec)?;
                let pred = model.predict_map(&pair.adversarial)?;
                Ok((Some(pair.adversarial), pred, pair.linf_achieved, pair.zero_gradient))
            })
            .collect::<Result<_>>()?;

        let mut per_image = Vec::with_capacity(samples.len());
        let mut adv_maps = Vec::with_capacity(samples.len());
        let mut examples = Vec::new();
        for (i, (adv, pred, linf, zero)) in outcomes.into_iter().enumerate() {
            let reference = &references[i];
            per_image.push(ConfusionMatrix::from_maps(&pred, reference)?);
            let scored = reference.labels.iter().filter(|&&l| l != reference.ignore_value).count();
            let changed = pred
                .labels
                .iter()
                .zip(&baseline[i].labels)
                .zip(&reference.labels)
                .filter(|((p, b), r)| **r != reference.ignore_value && p != b)
                .count();
            result.records.push(ImageRecord {
                epsilon: eps,
                index: i,
                path: samples[i].path.clone(),
                linf_achieved: linf,
                flipped: changed > 0,
                changed_fraction: if scored == 0 { 0.0 } else { changed as f64 / scored as f64 },
                zero_gradient: zero,
            });
            if examples.len() < cfg.keep_examples {
                examples.push(SweepExample {
                    path: samples[i].path.clone(),
                    adversarial: adv.unwrap_or_else(|| samples[i].image.clone()),
                    prediction: pred.clone(),
                });
            }
            adv_maps.push(pred);
        }
        let lost = lost_classes(&baseline, &adv_maps)?;
        let bundle = MetricBundle::from_images(&per_image, k, lost)?;
        let mut agg = ConfusionMatrix::new(k);
        for cm in &per_image {
            agg.merge_from(cm)?;
        }
        result.rows.push(SweepRow::from_bundle(eps, &bundle));
        result.per_class.push(agg.class_rows());
        result.bundles.push(bundle);
        result.examples.push(examples);
    }
    Ok(result)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        let cells: Vec<String> = r.values().iter().map(|v| cell(*v)).collect();
        writeln!(out, "{},{}", r.epsilon, cells.join(","))?;
    }
    Ok(())
}

pub fn read_sweep_csv<R: BufRead>(input: R) -> Result<Vec<SweepRow>> {
    let bad = |m: String| Error::InvalidConfig(format!("sweep csv: {m}"));
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| bad(e.to_string()))?
        .ok_or_else(|| bad("empty file".into()))?;
    if header.trim_end() != SWEEP_CSV_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("line {}: bad number {s:?}", n + 2)))
            }
        };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("line {}: expected 7 fields, found {}", n + 2, f.len())));
        }
        rows.push(SweepRow {
            epsilon: parse(f[0])?.ok_or_else(|| bad(format!("line {}: missing epsilon", n + 2)))?,
            pixel_acc: parse(f[1])?,
            miou: parse(f[2])?,
            pa: parse(f[3])?,
            macc: parse(f[4])?,
            miou_agg: parse(f[5])?,
            mf1: parse(f[6])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearHead, SegmenterModel};
    use crate::nn::{Backbone, BackboneSpec};
    use crate::pipeline::NormSpec;

    /// Single-channel identity backbone and a head that predicts class 1
    /// exactly when the pixel value exceeds 0.65.
    fn threshold_segmenter() -> SegmenterModel {
        let mut b = Backbone::new(BackboneSpec::tiny_cnn(1, [1, 1], 1), 0).unwrap();
        let mut centre = vec![0.0; 9];
        centre[4] = 1.0;
        let block = [centre, vec![0.0]].concat();
        b.set_params(&block.repeat(3)).unwrap();
        let mut m = SegmenterModel::new(b, 2, 2, NormSpec::identity(1), 0).unwrap();
        m.head = LinearHead {
            num_classes: 2,
            feature_dim: 1,
            weight: vec![0.0, 1.0],
            bias: vec![0.0, -0.65],
        };
        m
    }

    fn sample(px: [f64; 4], name: &str) -> SweepSample {
        let img = TensorImage::from_unit(1, 2, 2, px.to_vec(), NormSpec::identity(1)).unwrap().normalize().unwrap();
        SweepSample {
            path: name.into(),
            image: img,
            truth: None,
        }
    }

    fn grid(eps: &[f64]) -> SweepConfig {
        SweepConfig {
            epsilons: eps.to_vec(),
            loss_target: LossTarget::PredictedLabel,
            ..Default::default()
        }
    }

    #[test]
    fn hand_counted_two_image_sweep() {
        let m = threshold_segmenter();
        // Clean predictions: A = [0,0,0,1], B = [0,0,0,0]. At eps 0.5 the
        // 0.1 pixels rise to 0.6 (still class 0) and the 0.9 pixel falls to
        // 0.4 (flips to class 0).
        let data = vec![sample([0.1, 0.1, 0.1, 0.9], "a"), sample([0.1; 4], "b")];
        let out = epsilon_sweep(&m, &data, &grid(&[0.0, 0.5])).unwrap();
        assert_eq!(out.baseline[0].labels, vec![0, 0, 0, 1]);
        let zero = out.rows[0];
        assert!(zero.values().iter().all(|v| *v == Some(1.0)), "{zero:?}");

        // Image A: cm [[3,0],[1,0]] -> IoU 0.75, 0 -> mIoU 0.375
        // Image B: cm [[4,0],[0,0]] -> IoU 1, undefined -> mIoU 1
        // Aggregate [[7,0],[1,0]].
        let r = out.rows[1];
        let close = |a: Option<f64>, b: f64| assert!((a.unwrap() - b).abs() < 1e-12, "{a:?} vs {b}");
        close(r.pixel_acc, 7.0 / 8.0);
        close(r.pa, 7.0 / 8.0);
        close(r.miou, (0.375 + 1.0) / 2.0);
        close(r.miou_agg, (7.0 / 8.0 + 0.0) / 2.0);
        close(r.macc, 0.5);
        close(r.mf1, (14.0 / 15.0 + 0.0) / 2.0);
        assert_eq!(out.bundles[1].lost_classes.iter().copied().collect::<Vec<_>>(), vec![1]);
        let recs: Vec<&ImageRecord> = out.records.iter().filter(|r| r.epsilon == 0.5).collect();
        assert!(recs[0].flipped && !recs[1].flipped);
        assert!((recs[0].changed_fraction - 0.25).abs() < 1e-12);
        assert!(recs.iter().all(|r| (r.linf_achieved - 0.5).abs() < 1e-9));
    }

    #[test]
    fn grid_must_start_at_zero_and_ascend() {
        let m = threshold_segmenter();
        let data = vec![sample([0.1; 4], "b")];
        for bad in [vec![], vec![0.02, 0.04], vec![0.0, 0.04, 0.02], vec![0.0, 0.0]] {
            assert!(matches!(epsilon_sweep(&m, &data, &grid(&bad)), Err(Error::InvalidEpsilonGrid(_))));
        }
        assert!(matches!(epsilon_sweep(&m, &[], &grid(&[0.0])), Err(Error::EmptyDataset)));
    }

    #[test]
    fn ground_truth_baseline_needs_labels() {
        let m = threshold_segmenter();
        let data = vec![sample([0.1; 4], "nolabel.png")];
        let cfg = SweepConfig {
            baseline: Baseline::GroundTruth,
            ..grid(&[0.0])
        };
        assert!(matches!(epsilon_sweep(&m, &data, &cfg), Err(Error::MissingLabel { .. })));
    }

    #[test]
    fn ignore_pixels_stay_excluded_under_prediction_baseline() {
        let m = threshold_segmenter();
        let mut s = sample([0.1, 0.1, 0.1, 0.9], "a");
        s.truth = Some(LabelMap::new(2, 2, vec![0, 0, 0, 255], 2, 255).unwrap());
        let out = epsilon_sweep(&m, &[s], &grid(&[0.0, 0.5])).unwrap();
        // The flipping pixel is ignored, so nothing changes.
        assert_eq!(out.rows[1].pixel_acc, Some(1.0));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            SweepRow { epsilon: 0.0, pixel_acc: Some(1.0), miou: Some(1.0), pa: Some(1.0), macc: Some(1.0), miou_agg: Some(1.0), mf1: Some(1.0) },
            SweepRow { epsilon: 0.02, pixel_acc: Some(0.78), miou: None, pa: Some(0.78), macc: Some(0.5625), miou_agg: Some(0.1), mf1: Some(1.0 / 3.0) },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epsilon,pixel_acc,mIoU,PA,mAcc,mIoU_agg,mF1\n"));
        assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), rows);
        assert!(read_sweep_csv("eps,acc\n".as_bytes()).is_err());
    }
}
