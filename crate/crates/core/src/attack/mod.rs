//! Single-step FGSM in pixel space and the epsilon-sweep driver.

mod sweep;

pub use sweep::{
    epsilon_sweep, read_sweep_csv, write_sweep_csv, Baseline, ImageRecord, SweepConfig, SweepExample, SweepResult, SweepRow,
    SweepSample, SWEEP_CSV_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::model::{ClassifierModel, SegmenterModel};
use crate::pipeline::{NormSpec, TensorImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    #[default]
    Fgsm,
}

/// Which labels the attacked loss is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// Ground truth when available, otherwise the model's own prediction.
    #[default]
    TrueLabel,
    PredictedLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(default)]
    pub method: AttackMethod,
    /// L-infinity budget in [0, 1] pixel units.
    pub epsilon: f64,
    #[serde(default)]
    pub loss_target: LossTarget,
    #[serde(default = "default_clamp")]
    pub clamp: bool,
}

fn default_clamp() -> bool {
    true
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            method: AttackMethod::Fgsm,
            epsilon,
            loss_target: LossTarget::TrueLabel,
            clamp: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::NegativeEpsilon(self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialPair {
    pub clean: TensorImage,
    pub adversarial: TensorImage,
    pub epsilon: f64,
    /// Max absolute pixel-space difference actually applied.
    pub linf_achieved: f64,
    /// Class attacked against, for single-label targets.
    pub label_used: Option<usize>,
    /// The loss gradient was identically zero; `adversarial` is a clean copy.
    pub zero_gradient: bool,
}

/// A model FGSM can attack: dense or single-label prediction plus the loss
/// gradient with respect to the normalized input.
pub trait AttackTarget: Sync {
    fn num_classes(&self) -> usize;
    fn norm(&self) -> &NormSpec;
    fn predict_map(&self, x: &TensorImage) -> Result<LabelMap>;
    fn loss_and_input_grad(&self, x: &TensorImage, target: &LabelMap) -> Result<(f64, Vec<f64>)>;
}

impl AttackTarget for ClassifierModel {
    fn num_classes(&self) -> usize {
        ClassifierModel::num_classes(self)
    }

    fn norm(&self) -> &NormSpec {
        &self.norm
    }

    fn predict_map(&self, x: &TensorImage) -> Result<LabelMap> {
        Ok(LabelMap::single(self.predict(x)? as u32, self.num_classes()))
    }

    fn loss_and_input_grad(&self, x: &TensorImage, target: &LabelMap) -> Result<(f64, Vec<f64>)> {
        if target.labels.len() != 1 {
            return Err(Error::shape("1x1 label", format!("{}x{}", target.height, target.width)));
        }
        ClassifierModel::loss_and_input_grad(self, x, target.labels[0] as usize)
    }
}

impl AttackTarget for SegmenterModel {
    fn num_classes(&self) -> usize {
        SegmenterModel::num_classes(self)
    }

    fn norm(&self) -> &NormSpec {
        &self.norm
    }

    fn predict_map(&self, x: &TensorImage) -> Result<LabelMap> {
        SegmenterModel::predict_map(self, x)
    }

    fn loss_and_input_grad(&self, x: &TensorImage, target: &LabelMap) -> Result<(f64, Vec<f64>)> {
        SegmenterModel::loss_and_input_grad(self, x, target)
    }
}

/// `x_adv = clip(x + eps * sign(grad_x L), 0, 1)` in pixel space.
///
/// `x` must be normalized. The step is taken in normalized space as
/// `eps / std_c` per channel, which is the same pixel-space step since the
/// normalization is a positive per-channel scaling. With
/// [`LossTarget::TrueLabel`] the `truth` labels are used when given; the
/// model's prediction is the fallback.
pub fn fgsm<M: AttackTarget + ?Sized>(
    model: &M,
    x: &TensorImage,
    truth: Option<&LabelMap>,
    spec: &AttackSpec,
) -> Result<AdversarialPair> {
    spec.validate()?;
    if !x.is_normalized {
        return Err(Error::NotNormalized);
    }
    let target = match (spec.loss_target, truth) {
        (LossTarget::TrueLabel, Some(t)) => t.clone(),
        _ => model.predict_map(x)?,
    };
    let label_used = (target.labels.len() == 1).then(|| target.labels[0] as usize);
    let unchanged = |zero_gradient| AdversarialPair {
        clean: x.clone(),
        adversarial: x.clone(),
        epsilon: spec.epsilon,
        linf_achieved: 0.0,
        label_used,
        zero_gradient,
    };
    if spec.epsilon == 0.0 {
        return Ok(unchanged(false));
    }
    let (_, grad) = model.loss_and_input_grad(x, &target)?;
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(unchanged(true));
    }

    let plane = x.plane_len();
    let mut data = x.data.clone();
    let mut linf = 0.0f64;
    for c in 0..x.channels {
        let (m, s) = (x.norm.mean[c], x.norm.std[c]);
        let step = spec.epsilon / s;
        let (lo, hi) = ((0.0 - m) / s, (1.0 - m) / s);
        let range = c * plane..(c + 1) * plane;
        for (v, g) in data[range.clone()].iter_mut().zip(&grad[range]) {
            let before = *v;
            let mut after = before + step * sign(*g);
            if spec.clamp {
                after = after.clamp(lo, hi);
            }
            *v = after;
            linf = linf.max((after - before).abs() * s);
        }
    }
    Ok(AdversarialPair {
        clean: x.clone(),
        adversarial: TensorImage { data, ..x.clone() },
        epsilon: spec.epsilon,
        linf_achieved: linf,
        label_used,
        zero_gradient: false,
    })
}

/// Classifier convenience: attack against class `y`.
pub fn fgsm_class(model: &ClassifierModel, x: &TensorImage, y: usize, spec: &AttackSpec) -> Result<AdversarialPair> {
    if y >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: model.num_classes(),
            path: String::new(),
        });
    }
    fgsm(model, x, Some(&LabelMap::single(y as u32, model.num_classes())), spec)
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}
