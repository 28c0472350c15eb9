use super::LabelMap;
use crate::error::{Error, Result};

/// Per-pixel class probabilities, stored pixel-major (HWK).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * num_classes {
            return Err(Error::shape(height * width * num_classes, data.len()));
        }
        for (i, px) in data.chunks(num_classes).enumerate() {
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > 1e-5 || px.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidProbabilities(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(ProbMap {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Mean of `-ln p[target]` over non-ignore pixels; `None` when every pixel
/// is ignored.
pub fn ce_loss(probs: &ProbMap, target: &LabelMap) -> Result<Option<f64>> {
    if (probs.height, probs.width, probs.num_classes) != (target.height, target.width, target.num_classes) {
        return Err(Error::shape(
            format!("{}x{}x{}", target.height, target.width, target.num_classes),
            format!("{}x{}x{}", probs.height, probs.width, probs.num_classes),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &t) in target.labels.iter().enumerate() {
        if t == target.ignore_value {
            continue;
        }
        sum -= probs.pixel(i)[t as usize].ln();
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}
