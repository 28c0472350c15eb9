use std::sync::Arc;

use super::{argmax, softmax, LinearHead, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{LabelMap, ProbMap, DEFAULT_IGNORE};
use crate::nn::{Backbone, BackboneId, Tensor};
use crate::pipeline::{NormSpec, TensorImage};

/// Frozen stride-1 backbone with a per-pixel linear head.
#[derive(Debug, Clone)]
pub struct SegmenterModel {
    pub backbone: Arc<Backbone>,
    pub head: LinearHead,
    pub backbone_frozen: bool,
    pub norm: NormSpec,
    pub input_size: usize,
    pub ignore_value: u32,
    pub train_config: Option<TrainConfig>,
}

impl SegmenterModel {
    pub fn new(backbone: Backbone, num_classes: usize, input_size: usize, norm: NormSpec, head_seed: u64) -> Result<Self> {
        if backbone.output_stride() != 1 {
            return Err(Error::InvalidConfig(format!(
                "dense heads need a stride-1 backbone; {} has output stride {}",
                backbone.id(),
                backbone.output_stride()
            )));
        }
        if num_classes == 0 || input_size == 0 {
            return Err(Error::InvalidConfig("head classes and input size must be positive".into()));
        }
        if norm.channels() != backbone.in_channels() {
            return Err(Error::ChannelCount {
                expected: backbone.in_channels(),
                found: norm.channels(),
            });
        }
        let head = LinearHead::seeded(num_classes, backbone.feature_dim(), head_seed);
        Ok(SegmenterModel {
            backbone: Arc::new(backbone),
            head,
            backbone_frozen: true,
            norm,
            input_size,
            ignore_value: DEFAULT_IGNORE,
            train_config: None,
        })
    }

    pub fn backbone_id(&self) -> BackboneId {
        self.backbone.id()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    fn check_input(&self, x: &TensorImage) -> Result<Tensor> {
        if !x.is_normalized {
            return Err(Error::NotNormalized);
        }
        let expect = (self.backbone.in_channels(), self.input_size, self.input_size);
        if (x.channels, x.height, x.width) != expect {
            return Err(Error::shape(
                format!("{}x{}x{}", expect.0, expect.1, expect.2),
                format!("{}x{}x{}", x.channels, x.height, x.width),
            ));
        }
        Ok(Tensor::from_vec(x.channels, x.height, x.width, x.data.clone()))
    }

    pub fn feature_map(&self, x: &TensorImage) -> Result<Tensor> {
        Ok(self.backbone.feature_map(&self.check_input(x)?))
    }

    /// `K x H x W` logits and the `D x H x W` feature map.
    pub fn forward(&self, x: &TensorImage) -> Result<(Tensor, Tensor)> {
        let fmap = self.feature_map(x)?;
        Ok((self.head.as_pointwise().forward(&fmap), fmap))
    }

    pub fn probabilities(&self, x: &TensorImage) -> Result<ProbMap> {
        let (logits, _) = self.forward(x)?;
        let (k, plane) = (logits.channels, logits.plane());
        let mut data = Vec::with_capacity(k * plane);
        for i in 0..plane {
            let px: Vec<f64> = (0..k).map(|c| logits.data[c * plane + i]).collect();
            data.extend(softmax(&px));
        }
        ProbMap::new(logits.height, logits.width, k, data)
    }

    pub fn predict_map(&self, x: &TensorImage) -> Result<LabelMap> {
        let (logits, _) = self.forward(x)?;
        Ok(argmax_map(&logits, self.ignore_value))
    }

    /// Mean per-pixel cross-entropy over non-ignore pixels and its input gradient.
    pub fn loss_and_input_grad(&self, x: &TensorImage, target: &LabelMap) -> Result<(f64, Vec<f64>)> {
        let t = self.check_input(x)?;
        if (target.height, target.width) != (x.height, x.width) {
            return Err(Error::shape(
                format!("{}x{} target", x.height, x.width),
                format!("{}x{}", target.height, target.width),
            ));
        }
        let (fmap, trace) = self.backbone.feature_map_traced(&t);
        let conv = self.head.as_pointwise();
        let logits = conv.forward(&fmap);
        let (glogits, loss) = pixel_ce_grad(&logits, target)?;
        let gmap = conv.backward_input(fmap.shape(), &glogits);
        Ok((loss, self.backbone.backward(&trace, &gmap).data))
    }
}

pub(crate) fn argmax_map(logits: &Tensor, ignore_value: u32) -> LabelMap {
    let (k, plane) = (logits.channels, logits.plane());
    let labels = (0..plane)
        .map(|i| {
            let px: Vec<f64> = (0..k).map(|c| logits.data[c * plane + i]).collect();
            argmax(&px) as u32
        })
        .collect();
    LabelMap {
        height: logits.height,
        width: logits.width,
        labels,
        num_classes: k,
        ignore_value,
    }
}

/// Gradient of the mean non-ignore pixel CE on the logits, plus the loss.
/// All-ignore targets give zero loss and gradient.
pub(crate) fn pixel_ce_grad(logits: &Tensor, target: &LabelMap) -> Result<(Tensor, f64)> {
    let (k, plane) = (logits.channels, logits.plane());
    let valid = target.labels.iter().filter(|&&l| l != target.ignore_value).count();
    let mut grad = Tensor::zeros(k, logits.height, logits.width);
    if valid == 0 {
        return Ok((grad, 0.0));
    }
    let n = valid as f64;
    let mut loss = 0.0;
    for (i, &t) in target.labels.iter().enumerate() {
        if t == target.ignore_value {
            continue;
        }
        if t as usize >= k {
            return Err(Error::LabelOutOfRange {
                label: t as usize,
                num_classes: k,
                path: String::new(),
            });
        }
        let px: Vec<f64> = (0..k).map(|c| logits.data[c * plane + i]).collect();
        let p = softmax(&px);
        loss -= p[t as usize].ln();
        for c in 0..k {
            let y = if c == t as usize { 1.0 } else { 0.0 };
            grad.data[c * plane + i] = (p[c] - y) / n;
        }
    }
    Ok((grad, loss / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ce_loss;
    use crate::nn::BackboneSpec;
    use rand::{Rng, SeedableRng};

    fn model() -> SegmenterModel {
        let b = Backbone::new(BackboneSpec::tiny_cnn(3, [4, 4], 6), 3).unwrap();
        SegmenterModel::new(b, 3, 5, NormSpec::default(), 4).unwrap()
    }

    fn input(seed: u64) -> TensorImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        TensorImage::from_normalized(3, 5, 5, (0..75).map(|_| rng.random_range(-2.0..2.0)).collect(), NormSpec::default()).unwrap()
    }

    #[test]
    fn resnet_rejected_for_dense_head() {
        let b = Backbone::new(BackboneSpec::resnet18(), 0).unwrap();
        assert!(SegmenterModel::new(b, 3, 32, NormSpec::default(), 0).is_err());
    }

    #[test]
    fn loss_matches_ce_loss_on_probabilities() {
        let m = model();
        let x = input(1);
        let target = LabelMap::new(5, 5, (0..25).map(|i| if i % 7 == 0 { 255 } else { i % 3 }).collect(), 3, 255).unwrap();
        let (loss, _) = m.loss_and_input_grad(&x, &target).unwrap();
        let reference = ce_loss(&m.probabilities(&x).unwrap(), &target).unwrap().unwrap();
        assert!((loss - reference).abs() < 1e-12);
    }

    #[test]
    fn dense_input_gradient_matches_finite_differences() {
        let m = model();
        let x = input(2);
        let target = LabelMap::new(5, 5, (0..25).map(|i| if i == 3 { 255 } else { (i * 2) % 3 }).collect(), 3, 255).unwrap();
        let (_, g) = m.loss_and_input_grad(&x, &target).unwrap();
        let f = |t: &TensorImage| m.loss_and_input_grad(t, &target).unwrap().0;
        let d = 1e-6;
        let mut close = 0;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += d;
            let mut xm = x.clone();
            xm.data[i] -= d;
            let fd = (f(&xp) - f(&xm)) / (2.0 * d);
            if (fd - g[i]).abs() < 1e-6 + 1e-4 * fd.abs() {
                close += 1;
            }
        }
        assert!(close >= x.data.len() - 1, "{close}/{}", x.data.len());
    }

    #[test]
    fn predict_map_is_argmax_of_probabilities() {
        let m = model();
        let x = input(3);
        let map = m.predict_map(&x).unwrap();
        let probs = m.probabilities(&x).unwrap();
        for i in 0..25 {
            assert_eq!(map.labels[i] as usize, argmax(probs.pixel(i)));
        }
    }
}
