use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{defined_mean, LabelMap};
use crate::error::{Error, Result};

/// K x K tally; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored_pixels: 0,
        }
    }

    /// Builds from an explicit row-major count table.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape(num_classes * num_classes, counts.len()));
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts,
            ignored_pixels: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ignored_pixels(&self) -> u64 {
        self.ignored_pixels
    }

    /// Non-ignored pixels tallied so far.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.count(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|r| self.count(r, c)).sum()
    }

    /// One classified sample (a single "pixel").
    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.num_classes;
        if truth >= k || pred >= k {
            return Err(Error::LabelOutOfRange {
                label: truth.max(pred),
                num_classes: k,
                path: String::new(),
            });
        }
        self.counts[truth * k + pred] += 1;
        Ok(())
    }

    /// Tallies every pixel of `pred` against `truth`; ignore pixels in
    /// `truth` are counted separately and never enter the table.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::shape(
                format!("{}x{}", truth.height, truth.width),
                format!("{}x{}", pred.height, pred.width),
            ));
        }
        let k = self.num_classes;
        if pred.num_classes != k || truth.num_classes != k {
            return Err(Error::shape(
                format!("{k} classes"),
                format!("pred {} / truth {}", pred.num_classes, truth.num_classes),
            ));
        }
        for (&t, &p) in truth.labels.iter().zip(&pred.labels) {
            if t == truth.ignore_value {
                self.ignored_pixels += 1;
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p) as usize,
                    num_classes: k,
                    path: String::new(),
                });
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn from_maps(pred: &LabelMap, truth: &LabelMap) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(truth.num_classes);
        cm.accumulate(pred, truth)?;
        Ok(cm)
    }

    /// Elementwise sum.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    pub fn merge_from(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(
                format!("{} classes", self.num_classes),
                format!("{} classes", other.num_classes),
            ));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.ignored_pixels += other.ignored_pixels;
        Ok(())
    }

    fn ratio(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    /// TP / (TP + FP + FN) per class; `None` for classes with empty union.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.count(c, c);
                Self::ratio(tp, self.row_sum(c) + self.col_sum(c) - tp)
            })
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        defined_mean(&self.iou_per_class())
    }

    /// 2TP / (2TP + FP + FN) per class.
    pub fn dice_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.count(c, c);
                Self::ratio(2 * tp, self.row_sum(c) + self.col_sum(c))
            })
            .collect()
    }

    /// Macro-averaged Dice, reported as mF1.
    pub fn dice_f1(&self) -> Option<f64> {
        defined_mean(&self.dice_per_class())
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        Self::ratio(self.trace(), self.total())
    }

    /// Per-class recall, TP / row.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| Self::ratio(self.count(c, c), self.row_sum(c)))
            .collect()
    }

    pub fn mean_class_accuracy(&self) -> Option<f64> {
        defined_mean(&self.class_accuracy())
    }

    /// Per-class precision, TP / column.
    pub fn precision_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| Self::ratio(self.count(c, c), self.col_sum(c)))
            .collect()
    }

    pub fn macro_precision(&self) -> Option<f64> {
        defined_mean(&self.precision_per_class())
    }

    pub fn macro_recall(&self) -> Option<f64> {
        self.mean_class_accuracy()
    }

    pub fn class_rows(&self) -> Vec<ClassRow> {
        let iou = self.iou_per_class();
        let dice = self.dice_per_class();
        let acc = self.class_accuracy();
        (0..self.num_classes)
            .map(|c| ClassRow {
                class_id: c,
                iou: iou[c],
                dice: dice[c],
                accuracy: acc[c],
                support: self.row_sum(c),
            })
            .collect()
    }
}

/// One line of the per-class dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub accuracy: Option<f64>,
    pub support: u64,
}

impl ClassRow {
    pub const CSV_HEADER: &'static str = "class_id,iou,dice,accuracy,support";

    /// Writes rows as CSV; undefined ratios are written as empty cells.
    pub fn write_csv<W: Write>(rows: &[ClassRow], mut out: W) -> std::io::Result<()> {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.class_id,
                cell(r.iou),
                cell(r.dice),
                cell(r.accuracy),
                r.support
            )?;
        }
        Ok(())
    }
}

/// Full metric suite for a batch of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub pixel_acc: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over images of each image's mIoU.
    pub miou: Option<f64>,
    /// mIoU of the dataset-aggregated confusion matrix.
    pub miou_agg: Option<f64>,
    pub macc: Option<f64>,
    pub dice_f1: Option<f64>,
    pub lost_classes: BTreeSet<u32>,
}

impl MetricBundle {
    pub fn from_images(per_image: &[ConfusionMatrix], num_classes: usize, lost_classes: BTreeSet<u32>) -> Result<Self> {
        let mut agg = ConfusionMatrix::new(num_classes);
        for cm in per_image {
            agg.merge_from(cm)?;
        }
        let image_mious: Vec<Option<f64>> = per_image.iter().map(ConfusionMatrix::miou).collect();
        Ok(MetricBundle {
            pixel_acc: agg.pixel_accuracy(),
            per_class_iou: agg.iou_per_class(),
            miou: defined_mean(&image_mious),
            miou_agg: agg.miou(),
            macc: agg.mean_class_accuracy(),
            dice_f1: agg.dice_f1(),
            lost_classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm2(counts: [u64; 4]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(2, counts.to_vec()).unwrap()
    }

    fn maps(truth: &[u32], pred: &[u32], k: usize) -> (LabelMap, LabelMap) {
        let n = truth.len();
        (
            LabelMap::new(1, n, pred.to_vec(), k, 255).unwrap(),
            LabelMap::new(1, n, truth.to_vec(), k, 255).unwrap(),
        )
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let labels: Vec<u32> = (0..12).map(|i| i % 3).collect();
        let (p, t) = maps(&labels, &labels, 3);
        let cm = ConfusionMatrix::from_maps(&p, &t).unwrap();
        assert_eq!(cm.trace(), 12);
        assert_eq!(cm.total(), 12);
        for c in 0..3 {
            for d in 0..3 {
                if c != d {
                    assert_eq!(cm.count(c, d), 0);
                }
            }
        }
        assert_eq!(cm.miou(), Some(1.0));
        assert_eq!(cm.dice_f1(), Some(1.0));
        assert_eq!(cm.pixel_accuracy(), Some(1.0));
        assert_eq!(cm.mean_class_accuracy(), Some(1.0));
    }

    #[test]
    fn all_ignore_counts_nothing() {
        let (p, t) = maps(&[255; 6], &[0, 1, 2, 0, 1, 2], 3);
        let cm = ConfusionMatrix::from_maps(&p, &t).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored_pixels(), 6);
        assert_eq!(cm.pixel_accuracy(), None);
        assert_eq!(cm.miou(), None);
    }

    #[test]
    fn two_class_iou_by_hand() {
        let cm = cm2([2, 1, 1, 2]);
        assert_eq!(cm.iou_per_class(), vec![Some(0.5), Some(0.5)]);
        assert_eq!(cm.miou(), Some(0.5));
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        // class 1 never appears in truth or prediction
        let cm = ConfusionMatrix::from_counts(3, vec![3, 0, 1, 0, 0, 0, 1, 0, 2]).unwrap();
        let iou = cm.iou_per_class();
        assert_eq!(iou[1], None);
        let filtered: Vec<f64> = iou.iter().flatten().copied().collect();
        let expect = filtered.iter().sum::<f64>() / filtered.len() as f64;
        assert_eq!(filtered, vec![3.0 / 5.0, 2.0 / 4.0]);
        assert_eq!(cm.miou(), Some(expect));
    }

    #[test]
    fn dice_single_class_by_hand() {
        // class 0: TP=2, FN=1 (row), FP=1 (column)
        let cm = cm2([2, 1, 1, 0]);
        let d = cm.dice_per_class()[0].unwrap();
        assert!((d - 4.0 / 6.0).abs() < 1e-5);
        assert!((d - 0.66667).abs() < 1e-5);
    }

    #[test]
    fn pa_and_macc_with_empty_row() {
        let cm = cm2([3, 1, 0, 0]);
        assert_eq!(cm.pixel_accuracy(), Some(0.75));
        assert_eq!(cm.class_accuracy(), vec![Some(0.75), None]);
        assert_eq!(cm.mean_class_accuracy(), Some(0.75));
    }

    #[test]
    fn class_rows_csv() {
        let cm = cm2([3, 1, 0, 0]);
        let mut buf = Vec::new();
        ClassRow::write_csv(&cm.class_rows(), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "class_id,iou,dice,accuracy,support");
        assert_eq!(lines[1], "0,0.75,0.8571428571428571,0.75,4");
        assert_eq!(lines[2], "1,0,0,,0");
    }

    #[test]
    fn merge_rejects_class_mismatch() {
        assert!(ConfusionMatrix::new(2).merge(&ConfusionMatrix::new(3)).is_err());
    }

    proptest! {
        #[test]
        fn dice_iou_identity(counts in proptest::array::uniform4(0u64..50)) {
            let cm = cm2(counts);
            for (d, i) in cm.dice_per_class().iter().zip(cm.iou_per_class()) {
                match (d, i) {
                    (Some(d), Some(i)) => prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false, "definedness differs"),
                }
            }
        }

        #[test]
        fn defined_metrics_in_unit_range(counts in proptest::collection::vec(0u64..20, 9)) {
            let cm = ConfusionMatrix::from_counts(3, counts).unwrap();
            let all = [cm.miou(), cm.dice_f1(), cm.pixel_accuracy(), cm.mean_class_accuracy(), cm.macro_precision()];
            for v in all.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
