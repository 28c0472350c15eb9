//! Experiment configuration (TOML). Every section and field is optional and
//! falls back to the defaults below; unknown keys are rejected. Relative
//! paths are resolved against the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use advdet::attack::{Baseline, LossTarget};
use advdet::detector::{BandwidthRule, Metric, DEFAULT_RESERVOIR_CAP};
use advdet::nn::{BackboneId, BackboneSpec};
use advdet::pipeline::{AugmentSpec, NormSpec, IMAGENET_MEAN, IMAGENET_STD};
use advdet::synth::SynthConfig;
use advdet::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
    pub synthetic: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: PathBuf,
    pub global_seed: u64,
    pub task: Task,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "experiment".into(),
            output_dir: "runs/experiment".into(),
            global_seed: 0,
            task: Task::Classification,
        }
    }
}

/// Split directories live under `root`: `root/<split>/<class>/*` for
/// classification, `root/<split>/{images,masks}` for segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub test_split: String,
    pub ignore_value: u32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: "data/synthetic/classification".into(),
            train_split: "train".into(),
            val_split: "val".into(),
            test_split: "test".into(),
            ignore_value: 255,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub crop_size: usize,
    pub resize_short: usize,
    /// Random resized crop + flip during training.
    pub augment: bool,
    pub flip_probability: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            crop_size: 224,
            resize_short: 256,
            augment: false,
            flip_probability: 0.5,
            mean: IMAGENET_MEAN.to_vec(),
            std: IMAGENET_STD.to_vec(),
        }
    }
}

impl PreprocessSection {
    pub fn norm(&self) -> CliResult<NormSpec> {
        Ok(NormSpec::new(self.mean.clone(), self.std.clone())?)
    }

    pub fn eval_spec(&self) -> AugmentSpec {
        AugmentSpec {
            flip_probability: self.flip_probability,
            ..AugmentSpec::eval(self.crop_size, self.resize_short)
        }
    }

    pub fn train_spec(&self, seed: u64) -> AugmentSpec {
        if self.augment {
            AugmentSpec {
                resize_short: self.resize_short,
                flip_probability: self.flip_probability,
                ..AugmentSpec::train(self.crop_size, seed)
            }
        } else {
            self.eval_spec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneId,
    /// tiny-cnn hidden widths.
    pub hidden: [usize; 2],
    /// tiny-cnn feature width D (ResNets fix their own).
    pub feature_dim: usize,
    pub head_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneId::TinyCnn,
            hidden: [16, 32],
            feature_dim: 64,
            head_classes: advdet::model::DEFAULT_HEAD_CLASSES,
        }
    }
}

impl ModelSection {
    pub fn backbone_spec(&self) -> BackboneSpec {
        match self.backbone {
            BackboneId::TinyCnn => BackboneSpec::tiny_cnn(3, self.hidden, self.feature_dim),
            BackboneId::Resnet18 => BackboneSpec::resnet18(),
            BackboneId::Resnet50 => BackboneSpec::resnet50(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Select {
    /// Highest validation accuracy (the last epoch when there is no
    /// validation split).
    #[default]
    Best,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Labels must be below this; the head may be wider.
    pub num_classes: usize,
    pub select: Select,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            num_classes: t.num_classes,
            select: Select::Best,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            num_classes: self.num_classes,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilons: Vec<f64>,
    pub loss_target: LossTarget,
    pub clamp: bool,
    pub baseline: Baseline,
    /// Cap on attacked test images (evenly spaced over the split).
    pub max_images: Option<usize>,
    /// Examples per epsilon in the image panel.
    pub panel_images: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let s = advdet::SweepConfig::default();
        AttackSection {
            epsilons: s.epsilons,
            loss_target: s.loss_target,
            clamp: s.clamp,
            baseline: s.baseline,
            max_images: None,
            panel_images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    /// Metric behind the verdict column of the detections file.
    pub metric: Metric,
    pub target_fpr: f64,
    /// Fixed kernel bandwidth; overrides the rule and the scale.
    pub bandwidth: Option<f64>,
    /// How the bandwidth is derived from the reference set otherwise.
    pub bandwidth_rule: BandwidthRule,
    /// Multiplier applied to the rule's bandwidth.
    pub bandwidth_scale: f64,
    pub reservoir_cap: usize,
    pub reference_split: String,
    pub calibration_split: String,
    pub epsilons: Vec<f64>,
    pub max_images: Option<usize>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            metric: Metric::KDensity,
            target_fpr: 0.05,
            bandwidth: None,
            bandwidth_rule: BandwidthRule::Median,
            bandwidth_scale: 1.0,
            reservoir_cap: DEFAULT_RESERVOIR_CAP,
            reference_split: "train".into(),
            calibration_split: "val".into(),
            epsilons: vec![0.0, 0.1],
            max_images: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let p = &self.preprocess;
        if p.crop_size == 0 || p.resize_short < p.crop_size {
            return bad(format!("preprocess: need 0 < crop_size <= resize_short, got {} / {}", p.crop_size, p.resize_short));
        }
        self.preprocess.norm()?;
        self.model.backbone_spec().validate()?;
        if self.model.head_classes == 0 {
            return bad("model.head_classes must be positive".into());
        }
        if self.experiment.task == Task::Segmentation && self.model.backbone != BackboneId::TinyCnn {
            return bad(format!("segmentation needs the stride-1 tiny-cnn backbone, not {}", self.model.backbone));
        }
        self.train.to_train_config(0).validate(self.model.head_classes)?;
        self.sweep_config().validate()?;
        let d = &self.detector;
        if !(d.target_fpr > 0.0 && d.target_fpr < 1.0) {
            return bad(format!("detector.target_fpr must be in (0, 1), got {}", d.target_fpr));
        }
        if let Some(b) = d.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("detector.bandwidth must be positive, got {b}"));
            }
        }
        if !(d.bandwidth_scale > 0.0 && d.bandwidth_scale.is_finite()) {
            return bad(format!("detector.bandwidth_scale must be positive, got {}", d.bandwidth_scale));
        }
        if d.epsilons.is_empty() || d.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return bad(format!("detector.epsilons must be non-empty and non-negative: {:?}", d.epsilons));
        }
        self.synthetic.validate()?;
        Ok(())
    }

    pub fn sweep_config(&self) -> advdet::SweepConfig {
        advdet::SweepConfig {
            epsilons: self.attack.epsilons.clone(),
            loss_target: self.attack.loss_target,
            clamp: self.attack.clamp,
            baseline: self.attack.baseline,
            keep_examples: self.attack.panel_images,
        }
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.dataset.root.join(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[experiment]\nglobal_seed = 7\ntask = \"segmentation\"\n[attack]\nepsilons = [0.0, 0.1]\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment.global_seed, 7);
        assert_eq!(cfg.experiment.task, Task::Segmentation);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.attack.epsilons, vec![0.0, 0.1]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nlearnign_rate = 0.1\n").is_err());
        assert!(ExperimentConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.attack.epsilons = vec![0.02, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.task = Task::Segmentation;
        cfg.model.backbone = BackboneId::Resnet18;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.train.num_classes = 103;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.experiment.global_seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
