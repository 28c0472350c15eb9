//! Segmentation and classification metrics over a shared confusion matrix.
//!
//! Every score here (IoU, Dice/F1, pixel accuracy, class accuracy, macro
//! precision/recall) is a ratio of integer tallies held by
//! [`ConfusionMatrix`]. Classes whose denominator is zero are *undefined*:
//! they are reported as `None` and excluded from every mean rather than
//! counted as zero.

mod confusion;
mod label_map;
mod loss;

pub use confusion::{ClassRow, ConfusionMatrix, MetricBundle};
pub use label_map::{lost_classes, LabelMap, DEFAULT_IGNORE};
pub use loss::{ce_loss, ProbMap};

/// Mean of the defined entries, `None` when nothing is defined.
pub(crate) fn defined_mean(values: &[Option<f64>]) -> Option<f64> {
    let (sum, n) = values
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
