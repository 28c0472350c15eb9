//! Per-input detection statistics, threshold calibration and verdicts.
//!
//! All three scores follow the same direction: higher means more typical of
//! clean data, and an input is reported clean when `score >= T`.

mod reference;
mod roc;

pub use reference::{BandwidthRule, Kernel, ReferenceSet, ReferenceSetBuilder, DEFAULT_RESERVOIR_CAP, REFSET_MAGIC, REFSET_VERSION};
pub use roc::{evaluate_detector, write_roc_csv, RocPoint, RocSummary, ROC_CSV_HEADER};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierModel, ProbVector};
use crate::pipeline::TensorImage;

/// Smallest calibration set accepted by [`calibrate_threshold`].
pub const MIN_CALIBRATION_SCORES: usize = 20;

/// `max_i p_i`.
pub fn confidence_score(p: &ProbVector) -> f64 {
    p.as_slice()[p.argmax()]
}

/// `sum_{i != argmax} p_i ln p_i` with `0 ln 0 = 0`. Non-positive; zero
/// exactly when all mass sits on the top class.
pub fn non_max_entropy(p: &ProbVector) -> f64 {
    let top = p.argmax();
    p.as_slice()
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != top && v > 0.0)
        .map(|(_, &v)| v * v.ln())
        .sum()
}

/// `sum_i exp(-|z_i - z|^2 / (2 sigma^2))` over the reference vectors of
/// `class`.
pub fn kernel_density(z: &[f64], class: usize, refs: &ReferenceSet) -> Result<f64> {
    let vectors = refs.class_vectors(class).ok_or(Error::UnknownClass(class))?;
    if z.len() != refs.feature_dim() {
        return Err(Error::shape(format!("{}-d feature", refs.feature_dim()), z.len()));
    }
    let denom = 2.0 * refs.bandwidth() * refs.bandwidth();
    Ok(vectors
        .chunks_exact(refs.feature_dim())
        .map(|r| {
            let d2: f64 = r.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / denom).exp()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub predicted_class: usize,
    pub confidence: f64,
    pub non_me: f64,
    pub k_density: f64,
}

impl DetectionScores {
    /// Scores of one softmax output; `k_density` is supplied separately.
    pub fn from_probs(p: &ProbVector, k_density: f64) -> Self {
        DetectionScores {
            predicted_class: p.argmax(),
            confidence: confidence_score(p),
            non_me: non_max_entropy(p),
            k_density,
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Confidence => self.confidence,
            Metric::NonMe => self.non_me,
            Metric::KDensity => self.k_density,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Confidence,
    NonMe,
    KDensity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Confidence, Metric::NonMe, Metric::KDensity];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Confidence => "confidence",
            Metric::NonMe => "non_me",
            Metric::KDensity => "k_density",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown detection metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub metric: Metric,
    pub threshold: f64,
    pub target_fpr: f64,
    pub calibration_set_size: usize,
}

impl ThresholdPolicy {
    pub fn verdict(&self, score: f64) -> Verdict {
        if score >= self.threshold {
            Verdict::Clean
        } else {
            Verdict::Adversarial
        }
    }
}

/// Linear-interpolation quantile of sorted data (`h = (n - 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Threshold at the lower `target_fpr` quantile of clean scores.
pub fn calibrate_threshold(clean_scores: &[f64], target_fpr: f64, metric: Metric) -> Result<ThresholdPolicy> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidTargetFpr(target_fpr));
    }
    if clean_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::TooFewCalibrationScores {
            required: MIN_CALIBRATION_SCORES,
            found: clean_scores.len(),
        });
    }
    if clean_scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("calibration scores contain NaN".into()));
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ThresholdPolicy {
        metric,
        threshold: quantile_sorted(&sorted, target_fpr),
        target_fpr,
        calibration_set_size: clean_scores.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    Adversarial,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Clean => "clean",
            Verdict::Adversarial => "adversarial",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scores: DetectionScores,
    pub policy: ThresholdPolicy,
    pub verdict: Verdict,
    /// `score - T`; non-negative exactly for clean verdicts.
    pub margin: f64,
}

impl DetectionReport {
    pub fn new(scores: DetectionScores, policy: &ThresholdPolicy) -> Self {
        let score = scores.get(policy.metric);
        DetectionReport {
            scores,
            policy: policy.clone(),
            verdict: policy.verdict(score),
            margin: score - policy.threshold,
        }
    }

    pub fn record(&self, path: impl Into<String>, epsilon: Option<f64>) -> DetectionRecord {
        DetectionRecord {
            path: path.into(),
            predicted_class: self.scores.predicted_class,
            confidence: self.scores.confidence,
            non_me: self.scores.non_me,
            k_density: self.scores.k_density,
            metric: self.policy.metric,
            threshold: self.policy.threshold,
            verdict: self.verdict,
            margin: self.margin,
            epsilon,
        }
    }
}

/// One JSON-lines row of a detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub path: String,
    pub predicted_class: usize,
    pub confidence: f64,
    pub non_me: f64,
    pub k_density: f64,
    pub metric: Metric,
    pub threshold: f64,
    pub verdict: Verdict,
    pub margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

/// All three scores for one normalized input.
pub fn score_input(model: &ClassifierModel, x: &TensorImage, refs: &ReferenceSet) -> Result<DetectionScores> {
    let (logits, z) = model.forward(x)?;
    let p = ProbVector::from_logits(&logits);
    let kd = kernel_density(&z.z, p.argmax(), refs)?;
    Ok(DetectionScores::from_probs(&p, kd))
}

pub fn detect(x: &TensorImage, model: &ClassifierModel, refs: &ReferenceSet, policy: &ThresholdPolicy) -> Result<DetectionReport> {
    Ok(DetectionReport::new(score_input(model, x, refs)?, policy))
}
