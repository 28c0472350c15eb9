use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{backward_seq, forward_seq, forward_seq_traced, Trace};
use super::{ChannelAffine, Conv2d, Layer, MaxPool, Residual, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "tiny-cnn")]
    TinyCnn,
    #[serde(rename = "resnet18")]
    Resnet18,
    #[serde(rename = "resnet50")]
    Resnet50,
}

impl BackboneId {
    /// Stable on-disk code.
    pub fn code(self) -> u8 {
        match self {
            BackboneId::TinyCnn => 0,
            BackboneId::Resnet18 => 1,
            BackboneId::Resnet50 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BackboneId::TinyCnn),
            1 => Some(BackboneId::Resnet18),
            2 => Some(BackboneId::Resnet50),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::TinyCnn => "tiny-cnn",
            BackboneId::Resnet18 => "resnet18",
            BackboneId::Resnet50 => "resnet50",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(BackboneId::TinyCnn),
            "resnet18" => Ok(BackboneId::Resnet18),
            "resnet50" => Ok(BackboneId::Resnet50),
            other => Err(Error::InvalidConfig(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Architecture description sufficient to rebuild a backbone's layer graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: BackboneId,
    pub in_channels: usize,
    /// Hidden widths of the first two tiny-cnn blocks (ignored for ResNets).
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl BackboneSpec {
    pub fn tiny_cnn(in_channels: usize, hidden: [usize; 2], feature_dim: usize) -> Self {
        BackboneSpec {
            id: BackboneId::TinyCnn,
            in_channels,
            hidden: hidden.to_vec(),
            feature_dim,
        }
    }

    pub fn resnet18() -> Self {
        BackboneSpec {
            id: BackboneId::Resnet18,
            in_channels: 3,
            hidden: Vec::new(),
            feature_dim: 512,
        }
    }

    pub fn resnet50() -> Self {
        BackboneSpec {
            id: BackboneId::Resnet50,
            in_channels: 3,
            hidden: Vec::new(),
            feature_dim: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.id {
            BackboneId::TinyCnn => {
                if self.hidden.len() != 2 || self.hidden.contains(&0) || self.feature_dim == 0 || self.in_channels == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "tiny-cnn needs two positive hidden widths and a positive feature_dim, got {:?} / {}",
                        self.hidden, self.feature_dim
                    )));
                }
            }
            BackboneId::Resnet18 | BackboneId::Resnet50 => {
                let d = if self.id == BackboneId::Resnet18 { 512 } else { 2048 };
                if self.feature_dim != d || self.in_channels != 3 {
                    return Err(Error::InvalidConfig(format!(
                        "{} has feature_dim {d} and 3 input channels, got {} / {}",
                        self.id, self.feature_dim, self.in_channels
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward state retained for [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    layers: Vec<Trace>,
}

/// Frozen feature extractor producing a `feature_dim`-channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    layers: Vec<Layer>,
    /// Seed the weights were generated from; cleared once weights are overwritten.
    init_seed: Option<u64>,
}

fn he_conv(rng: &mut impl Rng, c: &mut Conv2d, fan: usize) {
    let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("positive std");
    // f32-representable weights survive checkpoint round-trips bit-exactly.
    c.weight.iter_mut().for_each(|w| *w = normal.sample(rng) as f32 as f64);
}

fn conv_bn(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> [Layer; 2] {
    let mut c = Conv2d::new(cin, cout, k, stride, pad, false);
    he_conv(rng, &mut c, cout * k * k);
    [Layer::Conv(c), Layer::Affine(ChannelAffine::batch_norm_init(cout))]
}

fn shortcut(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> Vec<Layer> {
    if stride != 1 || cin != cout {
        conv_bn(rng, cin, cout, 1, stride, 0).into()
    } else {
        Vec::new()
    }
}

fn basic_block(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> Layer {
    let mut main: Vec<Layer> = conv_bn(rng, cin, cout, 3, stride, 1).into();
    main.push(Layer::Relu);
    main.extend(conv_bn(rng, cout, cout, 3, 1, 1));
    let shortcut = shortcut(rng, cin, cout, stride);
    Layer::Residual(Box::new(Residual { main, shortcut }))
}

fn bottleneck(rng: &mut impl Rng, cin: usize, mid: usize, stride: usize) -> Layer {
    let cout = mid * 4;
    let mut main: Vec<Layer> = conv_bn(rng, cin, mid, 1, 1, 0).into();
    main.push(Layer::Relu);
    main.extend(conv_bn(rng, mid, mid, 3, stride, 1));
    main.push(Layer::Relu);
    main.extend(conv_bn(rng, mid, cout, 1, 1, 0));
    let shortcut = shortcut(rng, cin, cout, stride);
    Layer::Residual(Box::new(Residual { main, shortcut }))
}

fn resnet_stem(rng: &mut impl Rng) -> Vec<Layer> {
    let mut layers: Vec<Layer> = conv_bn(rng, 3, 64, 7, 2, 3).into();
    layers.push(Layer::Relu);
    layers.push(Layer::MaxPool(MaxPool {
        kernel: 3,
        stride: 2,
        padding: 1,
    }));
    layers
}

impl Backbone {
    /// Builds the layer graph with seeded He-normal weights.
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let layers = match spec.id {
            BackboneId::TinyCnn => {
                let widths = [spec.hidden[0], spec.hidden[1], spec.feature_dim];
                let mut cin = spec.in_channels;
                let mut layers = Vec::new();
                for &w in &widths {
                    let mut c = Conv2d::new(cin, w, 3, 1, 1, true);
                    he_conv(&mut rng, &mut c, cin * 9);
                    layers.push(Layer::Conv(c));
                    layers.push(Layer::Relu);
                    cin = w;
                }
                layers
            }
            BackboneId::Resnet18 => {
                let mut layers = resnet_stem(&mut rng);
                let mut cin = 64;
                for (i, &w) in [64, 128, 256, 512].iter().enumerate() {
                    for b in 0..2 {
                        let stride = if i > 0 && b == 0 { 2 } else { 1 };
                        layers.push(basic_block(&mut rng, cin, w, stride));
                        cin = w;
                    }
                }
                layers
            }
            BackboneId::Resnet50 => {
                let mut layers = resnet_stem(&mut rng);
                let mut cin = 64;
                for (i, (&mid, &blocks)) in [64, 128, 256, 512].iter().zip(&[3, 4, 6, 3]).enumerate() {
                    for b in 0..blocks {
                        let stride = if i > 0 && b == 0 { 2 } else { 1 };
                        layers.push(bottleneck(&mut rng, cin, mid, stride));
                        cin = mid * 4;
                    }
                }
                layers
            }
        };
        Ok(Backbone {
            spec,
            layers,
            init_seed: Some(seed),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn id(&self) -> BackboneId {
        self.spec.id
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    /// Spatial downsampling factor between input and feature map.
    pub fn output_stride(&self) -> usize {
        match self.spec.id {
            BackboneId::TinyCnn => 1,
            BackboneId::Resnet18 | BackboneId::Resnet50 => 32,
        }
    }

    /// Name of the layer whose pooled output forms feature vectors.
    pub fn feature_layer(&self) -> &'static str {
        match self.spec.id {
            BackboneId::TinyCnn => "tiny-cnn.block3.global_avg_pool",
            BackboneId::Resnet18 | BackboneId::Resnet50 => "layer4.global_avg_pool",
        }
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn feature_map(&self, x: &Tensor) -> Tensor {
        forward_seq(&self.layers, x)
    }

    pub fn feature_map_traced(&self, x: &Tensor) -> (Tensor, BackboneTrace) {
        let (out, layers) = forward_seq_traced(&self.layers, x);
        (out, BackboneTrace { layers })
    }

    /// Gradient with respect to the input, given the gradient on the feature map.
    pub fn backward(&self, trace: &BackboneTrace, grad: &Tensor) -> Tensor {
        backward_seq(&self.layers, &trace.layers, grad)
    }

    /// Global-average-pooled features.
    pub fn features(&self, x: &Tensor) -> Vec<f64> {
        self.feature_map(x).global_avg_pool()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.layers.iter().for_each(|l| l.visit_params(&mut |p| n += p.len()));
        n
    }

    /// All parameters flattened in layer order (weights before biases).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.layers.iter().for_each(|l| l.visit_params(&mut |p| out.extend_from_slice(p)));
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!("{} backbone params", self.param_count()), params.len()));
        }
        let mut off = 0;
        self.layers.iter_mut().for_each(|l| {
            l.visit_params_mut(&mut |p| {
                p.copy_from_slice(&params[off..off + p.len()]);
                off += p.len();
            })
        });
        self.init_seed = None;
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.layers.iter().for_each(|l| {
            l.visit_params(&mut |p| p.iter().for_each(|v| h.update(v.to_le_bytes())))
        });
        hex::encode(h.finalize())
    }
}
