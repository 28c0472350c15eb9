use std::sync::Arc;

use super::{argmax, softmax, FeatureVector, LinearHead, ProbVector, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Backbone, BackboneId, Tensor};
use crate::pipeline::{NormSpec, TensorImage};

/// Default head width: 100 trained classes plus two reserved ids.
pub const DEFAULT_HEAD_CLASSES: usize = 102;

/// Frozen backbone, global average pool, linear head.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub backbone: Arc<Backbone>,
    pub head: LinearHead,
    pub backbone_frozen: bool,
    pub norm: NormSpec,
    /// Expected square input side (the crop size).
    pub input_size: usize,
    /// Recipe the head was trained with, if any.
    pub train_config: Option<TrainConfig>,
}

impl ClassifierModel {
    pub fn new(backbone: Backbone, num_classes: usize, input_size: usize, norm: NormSpec, head_seed: u64) -> Result<Self> {
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
        Ok(ClassifierModel {
            backbone: Arc::new(backbone),
            head,
            backbone_frozen: true,
            norm,
            input_size,
            train_config: None,
        })
    }

    pub fn backbone_id(&self) -> BackboneId {
        self.backbone.id()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    pub(crate) fn check_input(&self, x: &TensorImage) -> Result<Tensor> {
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

    /// Pooled penultimate features.
    pub fn features(&self, x: &TensorImage) -> Result<FeatureVector> {
        let t = self.check_input(x)?;
        Ok(FeatureVector::new(self.backbone.features(&t), self.backbone.feature_layer()))
    }

    /// Logits and the feature vector they were computed from.
    pub fn forward(&self, x: &TensorImage) -> Result<(Vec<f64>, FeatureVector)> {
        let z = self.features(x)?;
        Ok((self.head.logits(&z.z), z))
    }

    pub fn probabilities(&self, x: &TensorImage) -> Result<ProbVector> {
        Ok(ProbVector::from_logits(&self.forward(x)?.0))
    }

    pub fn predict(&self, x: &TensorImage) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.0))
    }

    /// Cross-entropy against `label` and its gradient with respect to the
    /// (normalized) input values.
    pub fn loss_and_input_grad(&self, x: &TensorImage, label: usize) -> Result<(f64, Vec<f64>)> {
        if label >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
                path: String::new(),
            });
        }
        let t = self.check_input(x)?;
        let (fmap, trace) = self.backbone.feature_map_traced(&t);
        let z = fmap.global_avg_pool();
        let mut p = softmax(&self.head.logits(&z));
        let loss = -p[label].ln();
        p[label] -= 1.0;
        let gz = self.head.backward_features(&p);
        let n = fmap.plane() as f64;
        let mut gmap = Tensor::zeros(fmap.channels, fmap.height, fmap.width);
        for (c, chunk) in gmap.data.chunks_mut(fmap.plane()).enumerate() {
            chunk.fill(gz[c] / n);
        }
        Ok((loss, self.backbone.backward(&trace, &gmap).data))
    }

    /// Two-class model whose head is a bitwise copy of rows 0 and 1.
    pub fn slice_head(&self) -> Result<ClassifierModel> {
        if self.head.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "head slicing needs at least 2 classes, model has {}",
                self.head.num_classes
            )));
        }
        Ok(ClassifierModel {
            backbone: Arc::clone(&self.backbone),
            head: self.head.first_rows(2)?,
            ..self.clone()
        })
    }
}

pub fn predict(model: &ClassifierModel, x: &TensorImage) -> Result<usize> {
    model.predict(x)
}

pub fn slice_head(model: &ClassifierModel) -> Result<ClassifierModel> {
    model.slice_head()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneSpec, Layer};
    use rand::{Rng, SeedableRng};

    fn tiny(classes: usize, seed: u64) -> ClassifierModel {
        let b = Backbone::new(BackboneSpec::tiny_cnn(3, [4, 6], 8), seed).unwrap();
        ClassifierModel::new(b, classes, 6, NormSpec::default(), seed + 1).unwrap()
    }

    fn random_input(rng: &mut impl Rng, c: usize, s: usize) -> TensorImage {
        let norm = if c == 3 { NormSpec::default() } else { NormSpec::identity(c) };
        TensorImage::from_normalized(c, s, s, (0..c * s * s).map(|_| rng.random_range(-2.0..2.0)).collect(), norm).unwrap()
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let m = tiny(102, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let p = m.probabilities(&random_input(&mut rng, 3, 6)).unwrap();
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(p.len(), 102);
        }
    }

    #[test]
    fn bias_shift_leaves_features_alone() {
        let mut m = tiny(5, 2);
        let x = random_input(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1), 3, 6);
        let (l0, z0) = m.forward(&x).unwrap();
        m.head.bias[3] += 0.5;
        let (l1, z1) = m.forward(&x).unwrap();
        assert_eq!(z0, z1);
        assert!((l1[3] - l0[3] - 0.5).abs() < 1e-12);
        assert_eq!(l1[0], l0[0]);
    }

    #[test]
    fn rejects_unnormalized_and_wrong_size() {
        let m = tiny(3, 3);
        let x = TensorImage::from_unit(3, 6, 6, vec![0.5; 108], NormSpec::default()).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::NotNormalized)));
        let y = TensorImage::from_normalized(3, 5, 5, vec![0.5; 75], NormSpec::default()).unwrap();
        assert!(matches!(m.forward(&y), Err(Error::ShapeMismatch { .. })));
    }

    /// Hand-set single-channel 4x4 network against scalar loops.
    #[test]
    fn toy_forward_matches_scalar_oracle() {
        let spec = BackboneSpec::tiny_cnn(1, [1, 1], 2);
        let mut b = Backbone::new(spec, 0).unwrap();
        // Block 1: one 3x3 filter; block 2: 1x1-like centre tap; block 3: two filters.
        let k1: Vec<f64> = vec![0.1, -0.2, 0.3, 0.0, 1.0, 0.0, -0.3, 0.2, 0.1];
        let mut k2 = vec![0.0; 9];
        k2[4] = 2.0;
        let k3a: Vec<f64> = vec![0.0, 0.5, 0.0, 0.5, -1.0, 0.5, 0.0, 0.5, 0.0];
        let k3b: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0];
        let mut params = Vec::new();
        params.extend(&k1);
        params.push(0.05);
        params.extend(&k2);
        params.push(-0.1);
        params.extend(&k3a);
        params.extend(&k3b);
        params.extend([0.2, 0.0]);
        b.set_params(&params).unwrap();
        let mut m = ClassifierModel::new(b, 3, 4, NormSpec::identity(1), 0).unwrap();
        m.head.weight = vec![1.0, -1.0, 0.5, 0.5, -2.0, 0.0];
        m.head.bias = vec![0.0, 0.1, -0.1];

        let img: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 / 4.0 - 0.5).collect();
        let x = TensorImage::from_normalized(1, 4, 4, img.clone(), NormSpec::identity(1)).unwrap();

        let conv = |src: &[f64], k: &[f64], bias: f64| -> Vec<f64> {
            let mut out = vec![0.0; 16];
            for y in 0..4i32 {
                for xx in 0..4i32 {
                    let mut acc = bias;
                    for dy in -1..=1i32 {
                        for dx in -1..=1i32 {
                            let (sy, sx) = (y + dy, xx + dx);
                            if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                acc += k[((dy + 1) * 3 + dx + 1) as usize] * src[(sy * 4 + sx) as usize];
                            }
                        }
                    }
                    out[(y * 4 + xx) as usize] = acc.max(0.0);
                }
            }
            out
        };
        let a1 = conv(&img, &k1, 0.05);
        let a2 = conv(&a1, &k2, -0.1);
        let fa = conv(&a2, &k3a, 0.2);
        let fb = conv(&a2, &k3b, 0.0);
        let z = [fa.iter().sum::<f64>() / 16.0, fb.iter().sum::<f64>() / 16.0];
        let expect: Vec<f64> = (0..3)
            .map(|k| m.head.bias[k] + m.head.weight[k * 2] * z[0] + m.head.weight[k * 2 + 1] * z[1])
            .collect();

        let (logits, feat) = m.forward(&x).unwrap();
        assert!(matches!(m.backbone.layers()[0], Layer::Conv(_)));
        for (a, b) in feat.z.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in logits.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sliced_logits_equal_first_rows() {
        let m = tiny(102, 4);
        let s = m.slice_head().unwrap();
        assert_eq!(s.num_classes(), 2);
        assert!(Arc::ptr_eq(&m.backbone, &s.backbone));
        assert_eq!(s.head.weight[..], m.head.weight[..2 * 8]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random_input(&mut rng, 3, 6);
            let full = m.forward(&x).unwrap().0;
            let sliced = s.forward(&x).unwrap().0;
            assert_eq!(sliced[0].to_bits(), full[0].to_bits());
            assert_eq!(sliced[1].to_bits(), full[1].to_bits());
            let full01 = if full[1] > full[0] { 1 } else { 0 };
            assert_eq!(s.predict(&x).unwrap(), full01);
        }
    }

    #[test]
    fn sliced_softmax_differs_from_full_softmax() {
        let full = softmax(&[1.0, 0.0, 3.0]);
        let sliced = softmax(&[1.0, 0.0]);
        assert!((full[0] - 0.114).abs() < 1e-3);
        assert!((full[1] - 0.042).abs() < 1e-3);
        assert!((full[2] - 0.844).abs() < 1e-3);
        assert!((sliced[0] - 0.731).abs() < 1e-3);
        assert!((sliced[1] - 0.269).abs() < 1e-3);
    }

    #[test]
    fn slicing_one_class_head_fails() {
        assert!(tiny(1, 5).slice_head().is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = tiny(4, 6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = random_input(&mut rng, 3, 6);
        let (loss, g) = m.loss_and_input_grad(&x, 2).unwrap();
        let ce = |t: &TensorImage| -(m.probabilities(t).unwrap().as_slice()[2]).ln();
        assert!((loss - ce(&x)).abs() < 1e-12);
        let d = 1e-6;
        let mut close = 0;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += d;
            let mut xm = x.clone();
            xm.data[i] -= d;
            let fd = (ce(&xp) - ce(&xm)) / (2.0 * d);
            if (fd - g[i]).abs() < 1e-6 + 1e-4 * fd.abs() {
                close += 1;
            }
        }
        assert!(close as f64 >= 0.99 * x.data.len() as f64, "{close}/{}", x.data.len());
    }
}
