//! Image data model and the pre-processing contract shared by every stage.

pub mod dataset;
mod preprocess;
mod resize;

pub use dataset::{
    load_classification_dir, load_image, load_mask, load_segmentation_dir, save_mask_png, save_rgb_png, ClassificationSet,
};
pub use preprocess::{preprocess, preprocess_pair, CropBox};
pub use resize::{resize_bilinear, resize_nearest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;

/// ImageNet per-channel mean.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// ImageNet per-channel standard deviation.
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// An 8-bit RGB image as loaded from disk, with optional supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major HWC bytes.
    pub pixels: Vec<u8>,
    pub source_path: String,
    pub label: Option<usize>,
    pub label_map: Option<LabelMap>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, source_path: impl Into<String>) -> Result<Self> {
        let img = RawImage {
            height,
            width,
            channels: 3,
            pixels,
            source_path: source_path.into(),
            label: None,
            label_map: None,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_label_map(mut self, map: LabelMap) -> Self {
        self.label_map = Some(map);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidImage {
                path: self.source_path.clone(),
                reason: format!("degenerate size {}x{}", self.height, self.width),
            });
        }
        if self.channels != 3 {
            return Err(Error::ChannelCount {
                expected: 3,
                found: self.channels,
            });
        }
        if self.pixels.len() != self.height * self.width * 3 {
            return Err(Error::InvalidImage {
                path: self.source_path.clone(),
                reason: format!(
                    "pixel buffer has {} bytes, expected {}",
                    self.pixels.len(),
                    self.height * self.width * 3
                ),
            });
        }
        if let Some(map) = &self.label_map {
            if map.height != self.height || map.width != self.width {
                return Err(Error::shape(
                    format!("{}x{} label map", self.height, self.width),
                    format!("{}x{}", map.height, map.width),
                ));
            }
        }
        Ok(())
    }

    /// Planar CHW copy scaled to [0, 1].
    pub(crate) fn to_unit_planes(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * 3;
                for c in 0..3 {
                    out[c * h * w + y * w + x] = f64::from(self.pixels[base + c]) / 255.0;
                }
            }
        }
        out
    }
}

/// Per-channel affine normalization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for NormSpec {
    fn default() -> Self {
        NormSpec {
            mean: IMAGENET_MEAN.to_vec(),
            std: IMAGENET_STD.to_vec(),
        }
    }
}

impl NormSpec {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let spec = NormSpec { mean, std };
        spec.validate()?;
        Ok(spec)
    }

    /// Zero mean, unit std: normalized and pixel space coincide.
    pub fn identity(channels: usize) -> Self {
        NormSpec {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "norm spec has {} means and {} stds",
                self.mean.len(),
                self.std.len()
            )));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig(format!("norm std must be positive, got {s}")));
        }
        Ok(())
    }
}

/// A planar CHW float image plus the normalization it is expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub norm: NormSpec,
    pub is_normalized: bool,
}

impl TensorImage {
    /// Wraps pixel-space values in [0, 1].
    pub fn from_unit(channels: usize, height: usize, width: usize, data: Vec<f64>, norm: NormSpec) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        if norm.channels() != channels {
            return Err(Error::ChannelCount {
                expected: norm.channels(),
                found: channels,
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage {
                path: String::new(),
                reason: format!("unnormalized value {v} outside [0, 1]"),
            });
        }
        Ok(TensorImage {
            channels,
            height,
            width,
            data,
            norm,
            is_normalized: false,
        })
    }

    /// Wraps values already expressed in normalized space.
    pub fn from_normalized(channels: usize, height: usize, width: usize, data: Vec<f64>, norm: NormSpec) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        if norm.channels() != channels {
            return Err(Error::ChannelCount {
                expected: norm.channels(),
                found: channels,
            });
        }
        Ok(TensorImage {
            channels,
            height,
            width,
            data,
            norm,
            is_normalized: true,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    pub fn normalize(&self) -> Result<TensorImage> {
        if self.is_normalized {
            return Err(Error::InvalidConfig("tensor is already normalized".into()));
        }
        let plane = self.plane_len();
        let mut data = self.data.clone();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.norm.mean[c], self.norm.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(TensorImage {
            data,
            is_normalized: true,
            ..self.clone()
        })
    }

    /// Maps back to pixel space (`x * std + mean`), clamped to [0, 1].
    pub fn denormalize(&self) -> Result<TensorImage> {
        if !self.is_normalized {
            return Err(Error::AlreadyDenormalized);
        }
        let mut data = self.to_pixel_space();
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(TensorImage {
            data,
            is_normalized: false,
            ..self.clone()
        })
    }

    /// Pixel-space values without clamping.
    pub fn to_pixel_space(&self) -> Vec<f64> {
        if !self.is_normalized {
            return self.data.clone();
        }
        let plane = self.plane_len();
        let mut data = self.data.clone();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.norm.mean[c], self.norm.std[c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + m);
        }
        data
    }

    /// Quantizes a pixel-space view to interleaved RGB bytes.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::ChannelCount {
                expected: 3,
                found: self.channels,
            });
        }
        let px = if self.is_normalized {
            self.denormalize()?.data
        } else {
            self.data.clone()
        };
        let plane = self.plane_len();
        let mut out = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                out.push((px[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Train,
    Eval,
}

/// Crop/flip parameters for one pre-processing call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub crop_size: usize,
    /// Short-side length before the eval-mode center crop.
    pub resize_short: usize,
    pub flip_probability: f64,
    pub mode: AugmentMode,
    pub rng_seed: u64,
    /// Area fraction range for train-mode random resized crops.
    pub scale: (f64, f64),
    /// Aspect-ratio range for train-mode random resized crops.
    pub ratio: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            crop_size: 224,
            resize_short: 256,
            flip_probability: 0.5,
            mode: AugmentMode::Eval,
            rng_seed: 0,
            scale: (0.08, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl AugmentSpec {
    pub fn eval(crop_size: usize, resize_short: usize) -> Self {
        AugmentSpec {
            crop_size,
            resize_short,
            ..Default::default()
        }
    }

    pub fn train(crop_size: usize, rng_seed: u64) -> Self {
        AugmentSpec {
            crop_size,
            mode: AugmentMode::Train,
            rng_seed,
            ..Default::default()
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        AugmentSpec {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::InvalidConfig("crop_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if self.mode == AugmentMode::Eval && self.resize_short < self.crop_size {
            return Err(Error::InvalidConfig(format!(
                "resize_short {} is smaller than crop_size {}",
                self.resize_short, self.crop_size
            )));
        }
        let (s0, s1) = self.scale;
        let (r0, r1) = self.ratio;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
            return Err(Error::InvalidConfig(format!(
                "bad crop ranges scale={:?} ratio={:?}",
                self.scale, self.ratio
            )));
        }
        Ok(())
    }
}
