//! Adversarial-input detection toolkit: image pre-processing, frozen-backbone
//! classifiers and segmenters, FGSM attacks, detection statistics and
//! segmentation metrics.

pub mod attack;
mod binio;
pub mod detector;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use attack::{AdversarialPair, AttackSpec, Baseline, LossTarget, SweepConfig, SweepRow};
pub use detector::{DetectionReport, DetectionScores, Metric, ReferenceSet, ThresholdPolicy, Verdict};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, LabelMap, MetricBundle};
pub use model::{ClassifierModel, EpochLogRow, FeatureVector, LinearHead, ProbVector, SegmenterModel, TrainConfig};
pub use nn::{BackboneId, BackboneSpec};
pub use pipeline::{AugmentMode, AugmentSpec, NormSpec, RawImage, TensorImage};
