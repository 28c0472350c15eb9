use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IGNORE: u32 = 255;

/// Dense per-pixel class ids with a reserved ignore value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub ignore_value: u32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, num_classes: usize, ignore_value: u32) -> Result<Self> {
        let map = LabelMap {
            height,
            width,
            labels,
            num_classes,
            ignore_value,
        };
        map.validate()?;
        Ok(map)
    }

    /// A 1x1 map holding one class id (one "pixel" per classified sample).
    pub fn single(label: u32, num_classes: usize) -> Self {
        LabelMap {
            height: 1,
            width: 1,
            labels: vec![label],
            num_classes,
            ignore_value: DEFAULT_IGNORE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::shape(self.height * self.width, self.labels.len()));
        }
        if let Some(bad) = self
            .labels
            .iter()
            .find(|&&l| l != self.ignore_value && l as usize >= self.num_classes)
        {
            return Err(Error::LabelOutOfRange {
                label: *bad as usize,
                num_classes: self.num_classes,
                path: String::new(),
            });
        }
        Ok(())
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.labels[i] == self.ignore_value
    }

    /// Set of non-ignore class ids present.
    pub fn classes(&self) -> BTreeSet<u32> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != self.ignore_value)
            .collect()
    }
}

/// Classes predicted somewhere in `baseline` but nowhere in `adversarial`,
/// over the union of all images.
pub fn lost_classes(baseline: &[LabelMap], adversarial: &[LabelMap]) -> Result<BTreeSet<u32>> {
    if baseline.len() != adversarial.len() {
        return Err(Error::MismatchedImageSets(format!(
            "{} baseline maps vs {} adversarial maps",
            baseline.len(),
            adversarial.len()
        )));
    }
    let mut base = BTreeSet::new();
    let mut adv = BTreeSet::new();
    for (i, (b, a)) in baseline.iter().zip(adversarial).enumerate() {
        if (b.height, b.width) != (a.height, a.width) {
            return Err(Error::MismatchedImageSets(format!(
                "image {i}: {}x{} vs {}x{}",
                b.height, b.width, a.height, a.width
            )));
        }
        base.extend(b.classes());
        adv.extend(a.classes());
    }
    Ok(base.difference(&adv).copied().collect())
}
