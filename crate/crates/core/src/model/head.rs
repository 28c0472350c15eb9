use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::rng::rng_from_seed;

/// `logits = weight * z + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// `num_classes x feature_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        LinearHead {
            num_classes,
            feature_dim,
            weight: vec![0.0; num_classes * feature_dim],
            bias: vec![0.0; num_classes],
        }
    }

    /// Uniform in `[-1/sqrt(D), 1/sqrt(D)]`, rounded to f32 precision.
    pub fn seeded(num_classes: usize, feature_dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut rng = rng_from_seed(seed);
        let mut draw = || rng.random_range(-bound..=bound) as f32 as f64;
        let weight = (0..num_classes * feature_dim).map(|_| draw()).collect();
        let bias = (0..num_classes).map(|_| draw()).collect();
        LinearHead {
            num_classes,
            feature_dim,
            weight,
            bias,
        }
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weight[class * self.feature_dim..(class + 1) * self.feature_dim]
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.feature_dim, "feature dimension");
        (0..self.num_classes)
            .map(|k| self.bias[k] + self.row(k).iter().zip(z).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    /// `W^T g`: gradient on the features from a gradient on the logits.
    pub fn backward_features(&self, grad_logits: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.feature_dim];
        for (k, gk) in grad_logits.iter().enumerate() {
            for (gd, w) in g.iter_mut().zip(self.row(k)) {
                *gd += gk * w;
            }
        }
        g
    }

    /// The head as a 1x1 convolution over a feature map.
    pub(crate) fn as_pointwise(&self) -> Conv2d {
        Conv2d {
            in_channels: self.feature_dim,
            out_channels: self.num_classes,
            kernel: 1,
            stride: 1,
            padding: 0,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }

    /// Copy of the first `n` rows.
    pub fn first_rows(&self, n: usize) -> Result<LinearHead> {
        if n > self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "cannot take {n} rows from a {}-class head",
                self.num_classes
            )));
        }
        Ok(LinearHead {
            num_classes: n,
            feature_dim: self.feature_dim,
            weight: self.weight[..n * self.feature_dim].to_vec(),
            bias: self.bias[..n].to_vec(),
        })
    }
}
