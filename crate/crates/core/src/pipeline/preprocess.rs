use rand::Rng;

use super::resize::{resize_bilinear, resize_nearest};
use super::{AugmentMode, AugmentSpec, NormSpec, RawImage, TensorImage};
use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::rng::rng_from_seed;

/// Integer crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Resolved geometric transform for one image.
#[derive(Debug, Clone, Copy)]
struct Plan {
    /// Whole-image resize applied before cropping (eval mode).
    pre_resize: Option<(usize, usize)>,
    crop: CropBox,
    flip: bool,
}

fn random_resized_crop(h: usize, w: usize, aug: &AugmentSpec, rng: &mut impl Rng) -> CropBox {
    let area = (h * w) as f64;
    let (log_r0, log_r1) = (aug.ratio.0.ln(), aug.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(aug.scale.0..=aug.scale.1);
        let aspect = rng.random_range(log_r0..=log_r1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    // Fallback: largest centered box within the ratio range.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < aug.ratio.0 {
        (((w as f64 / aug.ratio.0).round() as usize).clamp(1, h), w)
    } else if in_ratio > aug.ratio.1 {
        (h, ((h as f64 * aug.ratio.1).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    CropBox {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

fn plan(h: usize, w: usize, aug: &AugmentSpec) -> Result<Plan> {
    aug.validate()?;
    match aug.mode {
        AugmentMode::Train => {
            let mut rng = rng_from_seed(aug.rng_seed);
            let crop = random_resized_crop(h, w, aug, &mut rng);
            let flip = rng.random::<f64>() < aug.flip_probability;
            Ok(Plan {
                pre_resize: None,
                crop,
                flip,
            })
        }
        AugmentMode::Eval => {
            let short = aug.resize_short as f64;
            let (rh, rw) = if h <= w {
                (aug.resize_short, (short * w as f64 / h as f64) as usize)
            } else {
                ((short * h as f64 / w as f64) as usize, aug.resize_short)
            };
            let c = aug.crop_size;
            if c > rh || c > rw {
                return Err(Error::InvalidConfig(format!(
                    "crop {c} exceeds resized image {rh}x{rw}"
                )));
            }
            Ok(Plan {
                pre_resize: Some((rh, rw)),
                crop: CropBox {
                    top: (rh - c) / 2,
                    left: (rw - c) / 2,
                    height: c,
                    width: c,
                },
                flip: false,
            })
        }
    }
}

fn crop_planes<T: Copy>(data: &[T], channels: usize, h: usize, w: usize, b: CropBox) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * b.height * b.width);
    for c in 0..channels {
        for y in b.top..b.top + b.height {
            let row = c * h * w + y * w;
            out.extend_from_slice(&data[row + b.left..row + b.left + b.width]);
        }
    }
    out
}

fn flip_planes<T: Copy>(data: &mut [T], channels: usize, h: usize, w: usize) {
    for c in 0..channels {
        for y in 0..h {
            data[c * h * w + y * w..c * h * w + (y + 1) * w].reverse();
        }
    }
}

fn apply_image(img: &RawImage, p: &Plan, size: usize) -> Vec<f64> {
    let (mut h, mut w) = (img.height, img.width);
    let mut planes = img.to_unit_planes();
    if let Some((rh, rw)) = p.pre_resize {
        planes = resize_bilinear(&planes, 3, h, w, rh, rw);
        (h, w) = (rh, rw);
    }
    let cropped = crop_planes(&planes, 3, h, w, p.crop);
    let mut out = resize_bilinear(&cropped, 3, p.crop.height, p.crop.width, size, size);
    if p.flip {
        flip_planes(&mut out, 3, size, size);
    }
    // Non-negative filter weights only overshoot by rounding.
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

fn apply_mask(map: &LabelMap, p: &Plan, size: usize) -> LabelMap {
    let (mut h, mut w) = (map.height, map.width);
    let mut labels = map.labels.clone();
    if let Some((rh, rw)) = p.pre_resize {
        labels = resize_nearest(&labels, h, w, rh, rw);
        (h, w) = (rh, rw);
    }
    let cropped = crop_planes(&labels, 1, h, w, p.crop);
    let mut out = resize_nearest(&cropped, p.crop.height, p.crop.width, size, size);
    if p.flip {
        flip_planes(&mut out, 1, size, size);
    }
    LabelMap {
        height: size,
        width: size,
        labels: out,
        ..map.clone()
    }
}

fn normalized(data: Vec<f64>, size: usize, norm: &NormSpec) -> Result<TensorImage> {
    norm.validate()?;
    if norm.channels() != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            found: norm.channels(),
        });
    }
    TensorImage::from_unit(3, size, size, data, norm.clone())?.normalize()
}

/// Crops (random-resized in train mode, resize-then-center in eval mode),
/// optionally flips, and normalizes an image.
///
/// Train-mode randomness is drawn only from `aug.rng_seed`.
pub fn preprocess(img: &RawImage, aug: &AugmentSpec, norm: &NormSpec) -> Result<TensorImage> {
    img.validate()?;
    let p = plan(img.height, img.width, aug)?;
    normalized(apply_image(img, &p, aug.crop_size), aug.crop_size, norm)
}

/// Like [`preprocess`], applying the identical geometric transform to the
/// image's label map (nearest-neighbour for labels).
pub fn preprocess_pair(img: &RawImage, aug: &AugmentSpec, norm: &NormSpec) -> Result<(TensorImage, LabelMap)> {
    img.validate()?;
    let map = img.label_map.as_ref().ok_or_else(|| Error::MissingLabel {
        path: img.source_path.clone(),
    })?;
    let p = plan(img.height, img.width, aug)?;
    let t = normalized(apply_image(img, &p, aug.crop_size), aug.crop_size, norm)?;
    Ok((t, apply_mask(map, &p, aug.crop_size)))
}
