//! Per-class reference features for kernel density scoring.
//!
//! File layout (little-endian): magic `ADVDREFS`, version u32, kernel u8,
//! three reserved bytes, class count u32, feature dim D u32, bandwidth f64,
//! then per class: class id u32, vector count u32, count x D f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quantile_sorted;
use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::rng::{item_seed, rng_from_seed, StageRng};

pub const REFSET_MAGIC: &[u8; 8] = b"ADVDREFS";
pub const REFSET_VERSION: u32 = 1;
pub const DEFAULT_RESERVOIR_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Rbf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    feature_dim: usize,
    bandwidth: f64,
    kernel: Kernel,
    /// Row-major vectors per class.
    classes: BTreeMap<usize, Vec<f64>>,
}

impl ReferenceSet {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn class_vectors(&self, class: usize) -> Option<&[f64]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn count(&self, class: usize) -> usize {
        self.classes.get(&class).map_or(0, |v| v.len() / self.feature_dim)
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(|v| v.len() / self.feature_dim).sum()
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        self.bandwidth = bandwidth;
        Ok(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let enc = (|| -> std::io::Result<()> {
            out.extend_from_slice(REFSET_MAGIC);
            out.extend_from_slice(&REFSET_VERSION.to_le_bytes());
            out.extend_from_slice(&[0, 0, 0, 0]);
            put_u32(&mut out, self.classes.len())?;
            put_u32(&mut out, self.feature_dim)?;
            out.extend_from_slice(&self.bandwidth.to_le_bytes());
            for (c, v) in &self.classes {
                put_u32(&mut out, *c)?;
                put_u32(&mut out, v.len() / self.feature_dim)?;
                put_f32s(&mut out, v)?;
            }
            Ok(())
        })();
        enc.map_err(|e| file_err(path, e.to_string()))?;
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes).map_err(|r| file_err(path, r))
    }
}

fn file_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::ReferenceFile {
        path: path.to_path_buf(),
        reason: reason.into(),
        expected_version: REFSET_VERSION,
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<ReferenceSet, String> {
    let io = |e: std::io::Error| e.to_string();
    let mut r = Reader::new(bytes);
    if r.bytes(8).map_err(io)? != REFSET_MAGIC {
        return Err("bad magic; not a reference set".into());
    }
    let version = r.u32().map_err(io)?;
    if version != REFSET_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let kernel = match r.u8().map_err(io)? {
        0 => Kernel::Rbf,
        k => return Err(format!("unknown kernel id {k}")),
    };
    r.bytes(3).map_err(io)?;
    let n = r.u32().map_err(io)? as usize;
    let d = r.u32().map_err(io)? as usize;
    let bandwidth = r.f64().map_err(io)?;
    check_bandwidth(bandwidth).map_err(|e| e.to_string())?;
    if d == 0 {
        return Err("zero feature dimension".into());
    }
    let mut classes = BTreeMap::new();
    for _ in 0..n {
        let c = r.u32().map_err(io)? as usize;
        let count = r.u32().map_err(io)? as usize;
        if count == 0 {
            return Err(format!("class {c} has no vectors"));
        }
        let v = r.f32s(count.checked_mul(d).ok_or("size overflow")?).map_err(io)?;
        if classes.insert(c, v).is_some() {
            return Err(format!("class {c} listed twice"));
        }
    }
    if !r.at_end().map_err(io)? {
        return Err("trailing bytes".into());
    }
    Ok(ReferenceSet {
        feature_dim: d,
        bandwidth,
        kernel,
        classes,
    })
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(())
}

struct Reservoir {
    seen: u64,
    rows: Vec<Vec<f64>>,
    rng: StageRng,
}

/// Streams clean features into per-class reservoirs of at most `cap`
/// vectors (uniform reservoir sampling, seeded per class).
pub struct ReferenceSetBuilder {
    feature_dim: usize,
    cap: usize,
    seed: u64,
    reservoirs: BTreeMap<usize, Reservoir>,
}

impl ReferenceSetBuilder {
    pub fn new(feature_dim: usize, cap: usize, seed: u64) -> Self {
        ReferenceSetBuilder {
            feature_dim,
            cap: cap.max(1),
            seed,
            reservoirs: BTreeMap::new(),
        }
    }

    /// Adds one feature vector, stored at single precision.
    pub fn add(&mut self, class: usize, z: &[f64]) -> Result<()> {
        if z.len() != self.feature_dim {
            return Err(Error::shape(format!("{}-d feature", self.feature_dim), z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite reference feature".into()));
        }
        let row: Vec<f64> = z.iter().map(|v| f64::from(*v as f32)).collect();
        let seed = self.seed;
        let res = self.reservoirs.entry(class).or_insert_with(|| Reservoir {
            seen: 0,
            rows: Vec::new(),
            rng: rng_from_seed(item_seed(seed, class as u64)),
        });
        res.seen += 1;
        if res.rows.len() < self.cap {
            res.rows.push(row);
        } else {
            let j = res.rng.random_range(0..res.seen) as usize;
            if j < self.cap {
                res.rows[j] = row;
            }
        }
        Ok(())
    }

    /// Finalizes the set. Without an explicit bandwidth the median
    /// within-class pairwise distance is used (1.0 if there are no pairs or
    /// all distances are zero).
    pub fn build(self, bandwidth: Option<f64>) -> Result<ReferenceSet> {
        if self.reservoirs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes: BTreeMap<usize, Vec<f64>> = self
            .reservoirs
            .into_iter()
            .map(|(c, r)| (c, r.rows.concat()))
            .collect();
        let bandwidth = match bandwidth {
            Some(b) => b,
            None => median_bandwidth(&classes, self.feature_dim),
        };
        check_bandwidth(bandwidth)?;
        Ok(ReferenceSet {
            feature_dim: self.feature_dim,
            bandwidth,
            kernel: Kernel::Rbf,
            classes,
        })
    }
}

fn median_bandwidth(classes: &BTreeMap<usize, Vec<f64>>, d: usize) -> f64 {
    let mut dists: Vec<f64> = classes
        .par_iter()
        .flat_map_iter(|(_, v)| {
            let rows: Vec<&[f64]> = v.chunks_exact(d).collect();
            let mut out = Vec::new();
            for i in 0..rows.len() {
                for j in i + 1..rows.len() {
                    let d2: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    out.push(d2.sqrt());
                }
            }
            out
        })
        .collect();
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = quantile_sorted(&dists, 0.5);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// How the kernel width is chosen when none is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Median within-class pairwise distance.
    #[default]
    Median,
    /// Scott's rule on the pooled within-class spread:
    /// `sqrt(v) * n^(-1 / (D + 4))`, with `v` the mean per-dimension
    /// within-class variance and `n` the mean class size.
    Scott,
}

impl BandwidthRule {
    /// Re-derives the width of `refs` (built with the median rule). Scott
    /// falls back to the median when there is no within-class spread.
    pub fn apply(self, refs: ReferenceSet) -> Result<ReferenceSet> {
        match self {
            BandwidthRule::Median => Ok(refs),
            BandwidthRule::Scott => match scott_bandwidth(&refs.classes, refs.feature_dim) {
                Some(b) => refs.with_bandwidth(b),
                None => Ok(refs),
            },
        }
    }
}

fn scott_bandwidth(classes: &BTreeMap<usize, Vec<f64>>, d: usize) -> Option<f64> {
    let (mut ss, mut dof) = (0.0, 0usize);
    for v in classes.values() {
        let n = v.len() / d;
        if n < 2 {
            continue;
        }
        let mut mean = vec![0.0; d];
        for row in v.chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
        }
        for row in v.chunks_exact(d) {
            ss += row.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
        dof += n - 1;
    }
    if dof == 0 || ss <= 0.0 {
        return None;
    }
    let var = ss / dof as f64 / d as f64;
    let total: usize = classes.values().map(|v| v.len() / d).sum();
    let n = total as f64 / classes.len() as f64;
    Some(var.sqrt() * n.powf(-1.0 / (d as f64 + 4.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scott_two_points_closed_form() {
        // One class, two points at distance r in D dims: pooled per-dim
        // variance r^2 / (2D), n = 2.
        let (d, r) = (4usize, 2.0f64);
        let mut b = ReferenceSetBuilder::new(d, 10, 0);
        b.add(0, &[0.0; 4]).unwrap();
        b.add(0, &[r, 0.0, 0.0, 0.0]).unwrap();
        b.add(1, &[9.0; 4]).unwrap();
        let refs = b.build(None).unwrap();
        assert_eq!(refs.bandwidth(), r);
        let n: f64 = 1.5;
        let expect = (r * r / (2.0 * d as f64)).sqrt() * n.powf(-1.0 / (d as f64 + 4.0));
        let got = BandwidthRule::Scott.apply(refs.clone()).unwrap().bandwidth();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert_eq!(BandwidthRule::Median.apply(refs).unwrap().bandwidth(), r);
    }

    #[test]
    fn scott_matches_naive_pooled_variance() {
        let mut rng = rng_from_seed(5);
        let d = 3;
        let mut b = ReferenceSetBuilder::new(d, 100, 0);
        let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for i in 0..14 {
            let v: Vec<f64> = (0..d).map(|_| f64::from(rng.random_range(-1.0f32..1.0))).collect();
            b.add(i % 3, &v).unwrap();
            by_class.entry(i % 3).or_default().push(v);
        }
        let mut ss = 0.0;
        let mut dof = 0.0;
        for rows in by_class.values() {
            for k in 0..d {
                let m: f64 = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
                ss += rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>();
            }
            dof += (rows.len() - 1) as f64;
        }
        let expect = (ss / dof / d as f64).sqrt() * (14.0f64 / 3.0).powf(-1.0 / (d as f64 + 4.0));
        let got = BandwidthRule::Scott.apply(b.build(None).unwrap()).unwrap().bandwidth();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn scott_without_spread_keeps_median() {
        let mut b = ReferenceSetBuilder::new(2, 10, 0);
        b.add(0, &[1.0, 0.0]).unwrap();
        b.add(1, &[0.0, 1.0]).unwrap();
        let refs = b.build(Some(0.7)).unwrap();
        assert_eq!(BandwidthRule::Scott.apply(refs).unwrap().bandwidth(), 0.7);
    }

    #[test]
    fn median_heuristic_pools_within_class_pairs() {
        let mut b = ReferenceSetBuilder::new(1, 10, 0);
        for v in [0.0, 1.0, 3.0] {
            b.add(0, &[v]).unwrap();
        }
        b.add(1, &[100.0]).unwrap();
        b.add(1, &[104.0]).unwrap();
        // pairs: 1, 3, 2 (class 0) and 4 (class 1) -> median 2.5
        assert_eq!(b.build(None).unwrap().bandwidth(), 2.5);
    }

    #[test]
    fn bandwidth_falls_back_to_one() {
        let mut b = ReferenceSetBuilder::new(2, 10, 0);
        b.add(5, &[1.0, 1.0]).unwrap();
        assert_eq!(b.build(None).unwrap().bandwidth(), 1.0);
    }

    #[test]
    fn reservoir_caps_and_is_seeded() {
        let run = |seed| {
            let mut b = ReferenceSetBuilder::new(1, 20, seed);
            for i in 0..500 {
                b.add(i % 2, &[i as f64]).unwrap();
            }
            b.build(Some(1.0)).unwrap()
        };
        let a = run(7);
        assert_eq!(a.count(0), 20);
        assert_eq!(a.count(1), 20);
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));
        // Late items must be able to enter the reservoir.
        assert!(a.class_vectors(0).unwrap().iter().any(|v| *v > 250.0));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.refset");
        let mut b = ReferenceSetBuilder::new(3, 200, 1);
        for i in 0..30 {
            b.add(i % 4, &[0.1 * i as f64, -1.0 / (i + 1) as f64, 2.7]).unwrap();
        }
        let set = b.build(None).unwrap();
        set.save(&path).unwrap();
        let back = ReferenceSet::load(&path).unwrap();
        assert_eq!(back, set);
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, 8 + 4 + 4 + 4 + 4 + 8 + 4 * 8 + 30 * 3 * 4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.refset");
        let mut b = ReferenceSetBuilder::new(2, 5, 1);
        b.add(0, &[1.0, 2.0]).unwrap();
        b.build(None).unwrap().save(&path).unwrap();
        let good = fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[8] = 2;
        fs::write(&path, &bad).unwrap();
        let msg = ReferenceSet::load(&path).unwrap_err().to_string();
        assert!(msg.contains("version 2") && msg.contains("expected format version 1"), "{msg}");
        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(ReferenceSet::load(&path), Err(Error::ReferenceFile { .. })));
    }
}
