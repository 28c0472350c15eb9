use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROC_CSV_HEADER: &str = "fpr,tpr,threshold";

/// Operating point for "flag as adversarial when score < threshold".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    /// Probability that a clean score exceeds an adversarial one, ties
    /// counting one half.
    pub auroc: f64,
    pub points: Vec<RocPoint>,
}

/// AUROC from the Mann-Whitney rank sum with midranks for ties, plus the
/// full ROC curve. Adversarial inputs are the positive class.
pub fn evaluate_detector(clean: &[f64], adversarial: &[f64]) -> Result<RocSummary> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if clean.iter().chain(adversarial).any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("scores contain NaN".into()));
    }
    let (n1, n2) = (clean.len() as f64, adversarial.len() as f64);
    let mut all: Vec<(f64, bool)> = clean.iter().map(|&s| (s, true)).chain(adversarial.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_clean = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum_clean += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_clean - n1 * (n1 + 1.0) / 2.0;
    let auroc = u / (n1 * n2);

    let mut thresholds: Vec<f64> = all.iter().map(|e| e.0).collect();
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let points = thresholds
        .into_iter()
        .map(|t| RocPoint {
            fpr: clean.iter().filter(|&&s| s < t).count() as f64 / n1,
            tpr: adversarial.iter().filter(|&&s| s < t).count() as f64 / n2,
            threshold: t,
        })
        .collect();
    Ok(RocSummary { auroc, points })
}

pub fn write_roc_csv<W: Write>(points: &[RocPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{ROC_CSV_HEADER}")?;
    for p in points {
        let t = if p.threshold.is_infinite() { "inf".to_string() } else { p.threshold.to_string() };
        writeln!(out, "{},{},{t}", p.fpr, p.tpr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn pairwise(clean: &[f64], adv: &[f64]) -> f64 {
        let mut s = 0.0;
        for c in clean {
            for a in adv {
                s += if c > a { 1.0 } else if c == a { 0.5 } else { 0.0 };
            }
        }
        s / (clean.len() * adv.len()) as f64
    }

    #[test]
    fn separated_scores_give_one() {
        let r = evaluate_detector(&[5.0, 6.0, 7.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(r.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(r.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
    }

    #[test]
    fn hand_ranked_ten_by_ten() {
        let clean = [0.9, 0.8, 0.8, 0.7, 0.65, 0.6, 0.5, 0.45, 0.3, 0.2];
        let adv = [0.85, 0.8, 0.55, 0.5, 0.4, 0.35, 0.25, 0.1, 0.05, 0.0];
        // Pooled ascending ranks (midranks on ties):
        // 0.0:1 0.05:2 0.1:3 0.2:4c 0.25:5 0.3:6c 0.35:7 0.4:8 0.45:9c
        // 0.5:10.5(c,a) 0.55:12 0.6:13c 0.65:14c 0.7:15c 0.8:17(c,c,a)
        // 0.85:19 0.9:20c
        // Clean rank sum = 4+6+9+10.5+13+14+15+17+17+20 = 125.5
        // U = 125.5 - 55 = 70.5, AUROC = 0.705
        let r = evaluate_detector(&clean, &adv).unwrap();
        assert!((r.auroc - 0.705).abs() < 1e-12);
        assert!((r.auroc - pairwise(&clean, &adv)).abs() < 1e-12);
    }

    #[test]
    fn identical_distributions_near_half() {
        let mut rng = rng_from_seed(1);
        let a: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        assert!((evaluate_detector(&a, &b).unwrap().auroc - 0.5).abs() < 0.02);
        assert_eq!(evaluate_detector(&[1.0; 5], &[1.0; 7]).unwrap().auroc, 0.5);
    }

    #[test]
    fn matches_pairwise_oracle_on_random_ties() {
        let mut rng = rng_from_seed(2);
        for _ in 0..50 {
            let a: Vec<f64> = (0..rng.random_range(1..30)).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            let b: Vec<f64> = (0..rng.random_range(1..30)).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            assert!((evaluate_detector(&a, &b).unwrap().auroc - pairwise(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(evaluate_detector(&[], &[1.0]).is_err());
    }

    #[test]
    fn csv_format() {
        let r = evaluate_detector(&[2.0], &[1.0]).unwrap();
        let mut buf = Vec::new();
        write_roc_csv(&r.points, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "fpr,tpr,threshold\n0,0,1\n0,1,2\n1,1,inf\n");
    }
}
