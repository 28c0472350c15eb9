use advdet::attack::fgsm_class;
use advdet::detector::{calibrate_threshold, evaluate_detector, MIN_CALIBRATION_SCORES};
use advdet::model::{load_checkpoint, save_checkpoint};
use advdet::nn::{Backbone, BackboneSpec};
use advdet::rng::rng_from_seed;
use advdet::synth::{generate_split, SynthConfig};
use advdet::{AttackSpec, ClassifierModel, Metric, NormSpec, TensorImage, Verdict};
use proptest::prelude::*;
use rand::Rng;

fn model(classes: usize) -> ClassifierModel {
    let backbone = Backbone::new(BackboneSpec::tiny_cnn(3, [4, 8], 16), 3).unwrap();
    ClassifierModel::new(backbone, classes, 8, NormSpec::default(), 4).unwrap()
}

fn image(seed: u64) -> TensorImage {
    let mut rng = rng_from_seed(seed);
    let data = (0..3 * 8 * 8).map(|_| rng.random_range(0.0..=1.0)).collect();
    TensorImage::from_unit(3, 8, 8, data, NormSpec::default()).unwrap().normalize().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fgsm_stays_in_budget_and_range(seed in 0u64..10_000, eps in 0.0f64..0.3, label in 0usize..5) {
        let m = model(5);
        let x = image(seed);
        let pair = fgsm_class(&m, &x, label, &AttackSpec::fgsm(eps)).unwrap();
        let (a, b) = (x.to_pixel_space(), pair.adversarial.to_pixel_space());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= eps + 1e-9);
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(q));
        }
    }

    #[test]
    fn auroc_is_antisymmetric(
        clean in prop::collection::vec(-5.0f64..5.0, 1..40),
        adv in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let ab = evaluate_detector(&clean, &adv).unwrap().auroc;
        let ba = evaluate_detector(&adv, &clean).unwrap().auroc;
        prop_assert!((ab + ba - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn calibrated_threshold_flags_at_most_target(
        scores in prop::collection::vec(-10.0f64..10.0, MIN_CALIBRATION_SCORES..200),
        fpr in 0.01f64..0.5,
    ) {
        let policy = calibrate_threshold(&scores, fpr, Metric::Confidence).unwrap();
        let flagged = scores.iter().filter(|&&s| policy.verdict(s) == Verdict::Adversarial).count();
        prop_assert!(flagged as f64 <= fpr * scores.len() as f64 + 1.0);
    }
}

#[test]
fn separated_scores_give_unit_auroc() {
    let clean: Vec<f64> = (0..10).map(|i| 10.0 + i as f64).collect();
    let adv: Vec<f64> = (0..10).map(|i| i as f64).collect();
    assert_eq!(evaluate_detector(&clean, &adv).unwrap().auroc, 1.0);
    assert_eq!(evaluate_detector(&clean, &clean).unwrap().auroc, 0.5);
}

#[test]
fn checkpoint_roundtrip_reproduces_logits() {
    let m = model(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for seed in 0..5 {
        let x = image(seed);
        let (a, _) = m.forward(&x).unwrap();
        let (b, _) = back.forward(&x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model(3), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn synthetic_split_is_seeded() {
    let cfg = SynthConfig {
        num_classes: 2,
        image_size: 12,
        train_per_class: 3,
        ..SynthConfig::default()
    };
    let a = generate_split(&cfg, "train", 7).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a, generate_split(&cfg, "train", 7).unwrap());
    assert_ne!(a, generate_split(&cfg, "train", 8).unwrap());
}
