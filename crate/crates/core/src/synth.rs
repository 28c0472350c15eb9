//! Synthetic shapes dataset: one coloured geometric shape per image on a
//! striped, noisy background, with a matching segmentation mask.
//!
//! Class `k` has its own shape and colour. Masks use 0 for background,
//! `k + 1` for the shape and 255 on the one-pixel shape boundary.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{LabelMap, DEFAULT_IGNORE};
use crate::pipeline::{save_mask_png, save_rgb_png, RawImage};
use crate::rng::{item_seed, rng_from_seed, stage_seed, StageRng};

pub const SHAPES: [&str; 8] = ["circle", "square", "triangle", "diamond", "cross", "ring", "hbar", "vbar"];

const PALETTE: [[u8; 3]; 12] = [
    [220, 40, 40],
    [40, 170, 60],
    [40, 80, 220],
    [230, 200, 30],
    [200, 50, 200],
    [30, 200, 210],
    [240, 130, 20],
    [120, 60, 20],
    [250, 250, 250],
    [20, 20, 20],
    [130, 220, 130],
    [150, 120, 240],
];

pub const MAX_CLASSES: usize = PALETTE.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Per-channel colour jitter in 0..=255 units.
    pub color_jitter: u8,
    /// Background noise amplitude in 0..=255 units.
    pub noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            image_size: 32,
            train_per_class: 40,
            val_per_class: 10,
            test_per_class: 60,
            color_jitter: 12,
            noise: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "synthetic num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidConfig(format!("synthetic image_size must be >= 8, got {}", self.image_size)));
        }
        Ok(())
    }

    pub fn class_name(&self, k: usize) -> String {
        format!("{k:02}_{}", SHAPES[k % SHAPES.len()])
    }

    pub fn split_count(&self, split: &str) -> usize {
        match split {
            "train" => self.train_per_class,
            "val" => self.val_per_class,
            _ => self.test_per_class,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape % SHAPES.len() {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= r * 0.8 && ay <= r * 0.8,
        // upward triangle with apex at -r and base at +0.8r
        2 => dy >= -r && dy <= 0.8 * r && ax <= (dy + r) / 1.8 * 0.9,
        3 => ax + ay <= r,
        4 => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        6 => ax <= r && ay <= r * 0.35,
        _ => ay <= r && ax <= r * 0.35,
    }
}

/// Draws one sample of class `k` from `rng`.
pub fn draw_sample(cfg: &SynthConfig, k: usize, rng: &mut StageRng, name: &str) -> Result<RawImage> {
    let s = cfg.image_size;
    let sf = s as f64;
    let r = rng.random_range(0.22..0.36) * sf;
    let cx = rng.random_range(r..sf - r);
    let cy = rng.random_range(r..sf - r);
    let jitter = i16::from(cfg.color_jitter);
    let color: Vec<u8> = PALETTE[k]
        .iter()
        .map(|&c| (i16::from(c) + rng.random_range(-jitter..=jitter)).clamp(0, 255) as u8)
        .collect();

    let base = rng.random_range(90.0..160.0);
    let freq = rng.random_range(0.15..0.6);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let noise = f64::from(cfg.noise);

    let mut inside_mask = vec![false; s * s];
    let mut pixels = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = inside(k, px - cx, py - cy, r);
            inside_mask[y * s + x] = hit;
            if hit {
                pixels.extend_from_slice(&color);
            } else {
                let stripe = 18.0 * ((px * ca + py * sa) * freq).sin();
                for tint in [0.0, 6.0, -6.0] {
                    let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                    pixels.push((base + stripe + tint + n).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    let mut labels = vec![0u32; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if !inside_mask[i] {
                continue;
            }
            let edge = [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)].iter().any(|(ox, oy)| {
                let (nx, ny) = (x as i64 + ox, y as i64 + oy);
                nx < 0 || ny < 0 || nx >= s as i64 || ny >= s as i64 || !inside_mask[ny as usize * s + nx as usize]
            });
            labels[i] = if edge { DEFAULT_IGNORE } else { k as u32 + 1 };
        }
    }
    let map = LabelMap::new(s, s, labels, cfg.num_classes + 1, DEFAULT_IGNORE)?;
    Ok(RawImage::new(s, s, pixels, name)?.with_label(k).with_label_map(map))
}

/// All samples of one split, class-major, each seeded independently.
pub fn generate_split(cfg: &SynthConfig, split: &str, seed: u64) -> Result<Vec<RawImage>> {
    cfg.validate()?;
    let split_seed = stage_seed(seed, &format!("synthetic/{split}"));
    let n = cfg.split_count(split);
    let mut out = Vec::with_capacity(n * cfg.num_classes);
    for k in 0..cfg.num_classes {
        for i in 0..n {
            let mut rng = rng_from_seed(item_seed(item_seed(split_seed, k as u64), i as u64));
            out.push(draw_sample(cfg, k, &mut rng, &format!("{}/{i:04}", cfg.class_name(k)))?);
        }
    }
    Ok(out)
}

/// Writes `root/classification/<split>/<class>/<i>.png` and
/// `root/segmentation/<split>/{images,masks}/<class>_<i>.png`.
/// Returns the written file paths relative to `root`.
pub fn write_dataset(cfg: &SynthConfig, root: &Path, seed: u64) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for split in SPLITS {
        let samples = generate_split(cfg, split, seed)?;
        let cls_root = root.join("classification").join(split);
        let seg_root = root.join("segmentation").join(split);
        for k in 0..cfg.num_classes {
            let d = cls_root.join(cfg.class_name(k));
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for sub in ["images", "masks"] {
            let d = seg_root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for s in &samples {
            let k = s.label.unwrap_or(0);
            let idx = s.source_path.rsplit('/').next().unwrap_or_default();
            let cls_rel = format!("classification/{split}/{}/{idx}.png", cfg.class_name(k));
            save_rgb_png(&root.join(&cls_rel), s)?;
            let stem = format!("{}_{idx}", cfg.class_name(k));
            let img_rel = format!("segmentation/{split}/images/{stem}.png");
            let mask_rel = format!("segmentation/{split}/masks/{stem}.png");
            save_rgb_png(&root.join(&img_rel), s)?;
            if let Some(map) = &s.label_map {
                save_mask_png(&root.join(&mask_rel), map)?;
            }
            written.extend([cls_rel, img_rel, mask_rel]);
        }
    }
    Ok(written)
}
