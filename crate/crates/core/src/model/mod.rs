//! Frozen-backbone models with a trainable linear head.
//!
//! [`ClassifierModel`] pools the backbone's feature map into one feature
//! vector per image; [`SegmenterModel`] applies the same kind of head at
//! every spatial position of a stride-1 feature map.

mod checkpoint;
mod classifier;
mod head;
mod log;
mod segmenter;
mod train;

pub use checkpoint::{
    load_checkpoint, load_segmenter_checkpoint, save_checkpoint, save_segmenter_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, FIXED_HEADER_LEN,
};
pub use classifier::{predict, slice_head, ClassifierModel, DEFAULT_HEAD_CLASSES};
pub use head::LinearHead;
pub use log::{EpochLogRow, Phase};
pub use segmenter::SegmenterModel;
pub use train::{head_gradient, train_head, train_segmenter_head, BestModel, SgdMomentum, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Penultimate-layer embedding of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub z: Vec<f64>,
    pub source_layer: String,
}

impl FeatureVector {
    pub fn new(z: Vec<f64>, source_layer: impl Into<String>) -> Self {
        FeatureVector {
            z,
            source_layer: source_layer.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    p: Vec<f64>,
}

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidProbabilities("empty vector".into()));
        }
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidProbabilities(format!("entry {v} outside [0, 1]")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidProbabilities(format!("entries sum to {s}")));
        }
        Ok(ProbVector { p })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        ProbVector { p: softmax(logits) }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the maximum, breaking ties toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[-1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let n = rng.random_range(1..12);
            // Coarse values make ties common.
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            let mut oracle = 0;
            let mut best = f64::NEG_INFINITY;
            for (i, x) in v.iter().enumerate() {
                if *x > best {
                    best = *x;
                    oracle = i;
                }
            }
            assert_eq!(argmax(&v), oracle);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let p = softmax(&[1000.0, 1001.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[0.0, 1.0, -1.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }
}
