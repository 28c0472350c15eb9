use std::collections::BTreeMap;

use advdet::attack::{fgsm, AttackSpec};
use advdet::detector::{
    calibrate_threshold, evaluate_detector, kernel_density, write_roc_csv, DetectionRecord, ReferenceSetBuilder,
};
use advdet::rng::stage_seed;
use advdet::{
    ClassifierModel, DetectionReport, DetectionScores, Error, LabelMap, Metric, ProbVector, ReferenceSet, TensorImage,
    ThresholdPolicy, Verdict,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Task};
use crate::data::{check_class_names, display_path, eval_tensors, load_split, subsample};
use crate::error::{CliError, CliResult};
use crate::manifest::ArtifactKind;
use crate::plot::{line_chart, Series};
use crate::run::{eps_tag, load_classifier, RunContext};

pub const REFERENCE_FILE: &str = "detect/reference.refset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Source {
    Clean,
    Adversarial,
}

#[derive(Serialize)]
struct Row {
    #[serde(flatten)]
    record: DetectionRecord,
    source: Source,
    /// The predicted class has no reference features; k_density is 0.
    unknown_class: bool,
}

#[derive(Serialize)]
struct EpsilonSummary {
    epsilon: f64,
    images: usize,
    auroc: BTreeMap<Metric, f64>,
    flagged_fraction_clean: f64,
    flagged_fraction_adversarial: f64,
    unknown_class_adversarial: usize,
}

#[derive(Serialize)]
struct Summary {
    metric: Metric,
    target_fpr: f64,
    bandwidth: f64,
    reference_vectors: usize,
    calibration_images: usize,
    calibration_flagged_fraction: f64,
    test_images: usize,
    unknown_class_clean: usize,
    epsilons: Vec<EpsilonSummary>,
}

#[derive(Clone, Copy)]
struct Scored {
    scores: DetectionScores,
    unknown_class: bool,
}

/// Scores one input. A prediction outside the reference classes gets a
/// k_density of 0, so any positive threshold flags it.
fn score(model: &ClassifierModel, x: &TensorImage, refs: &ReferenceSet) -> advdet::Result<Scored> {
    let (logits, z) = model.forward(x)?;
    let p = ProbVector::from_logits(&logits);
    let (kd, unknown_class) = match kernel_density(&z.z, p.argmax(), refs) {
        Ok(kd) => (kd, false),
        Err(Error::UnknownClass(_)) => (0.0, true),
        Err(e) => return Err(e),
    };
    Ok(Scored {
        scores: DetectionScores::from_probs(&p, kd),
        unknown_class,
    })
}

fn score_all(model: &ClassifierModel, xs: &[TensorImage], refs: &ReferenceSet) -> CliResult<Vec<Scored>> {
    Ok(xs.par_iter().map(|x| score(model, x, refs)).collect::<advdet::Result<Vec<_>>>()?)
}

fn metric_scores(s: &[Scored], m: Metric) -> Vec<f64> {
    s.iter().map(|v| v.scores.get(m)).collect()
}

fn flagged_fraction(s: &[Scored], policy: &ThresholdPolicy) -> f64 {
    let n = s
        .iter()
        .filter(|v| policy.verdict(v.scores.get(policy.metric)) == Verdict::Adversarial)
        .count();
    n as f64 / s.len().max(1) as f64
}

fn build_reference(cfg: &ExperimentConfig, model: &ClassifierModel) -> CliResult<ReferenceSet> {
    let split = load_split(cfg, &cfg.detector.reference_split, true)?;
    let xs = eval_tensors(&split.samples, &cfg.preprocess.eval_spec(), &model.norm)?;
    let feats: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|x| model.features(x).map(|f| f.z))
        .collect::<advdet::Result<_>>()?;
    let seed = stage_seed(cfg.experiment.global_seed, "detect/reservoir");
    let mut builder = ReferenceSetBuilder::new(model.feature_dim(), cfg.detector.reservoir_cap, seed);
    for (s, z) in split.samples.iter().zip(&feats) {
        let label = s.label.ok_or_else(|| Error::MissingLabel {
            path: s.source_path.clone(),
        })?;
        builder.add(label, z)?;
    }
    let refs = match cfg.detector.bandwidth {
        Some(b) => builder.build(Some(b))?,
        None => {
            let refs = cfg.detector.bandwidth_rule.apply(builder.build(None)?)?;
            let b = refs.bandwidth() * cfg.detector.bandwidth_scale;
            refs.with_bandwidth(b)?
        }
    };
    info!(
        "reference set: {} vectors over {} classes, bandwidth {:.4}",
        refs.total(),
        refs.classes().count(),
        refs.bandwidth()
    );
    Ok(refs)
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.experiment.task != Task::Classification {
        return Err(CliError::Config("detect works on classification runs only".into()));
    }
    let mut ctx = RunContext::start(cfg, "detect")?;
    let model = load_classifier(&ctx.selected_checkpoint())?;
    let det = &cfg.detector;

    let ref_path = ctx.path(REFERENCE_FILE);
    let refs = if ref_path.is_file() {
        info!("using existing reference set {}", ref_path.display());
        ReferenceSet::load(&ref_path)?
    } else {
        let refs = build_reference(cfg, &model)?;
        refs.save(&ref_path)?;
        refs
    };
    if refs.feature_dim() != model.feature_dim() {
        return Err(CliError::Validation(format!(
            "{} holds {}-d features but the model produces {}-d",
            ref_path.display(),
            refs.feature_dim(),
            model.feature_dim()
        )));
    }
    ctx.register(REFERENCE_FILE, ArtifactKind::ReferenceSet);

    let eval = cfg.preprocess.eval_spec();
    let calib = load_split(cfg, &det.calibration_split, true)?;
    let test = load_split(cfg, &cfg.dataset.test_split, true)?;
    check_class_names(&calib, &test)?;
    let calib_x = eval_tensors(&calib.samples, &eval, &model.norm)?;
    let calib_scores = score_all(&model, &calib_x, &refs)?;
    let policies: BTreeMap<Metric, ThresholdPolicy> = Metric::ALL
        .iter()
        .map(|&m| Ok((m, calibrate_threshold(&metric_scores(&calib_scores, m), det.target_fpr, m)?)))
        .collect::<advdet::Result<_>>()?;
    let policy = &policies[&det.metric];
    info!("{} threshold {:.6} at target FPR {}", det.metric, policy.threshold, det.target_fpr);
    ctx.write_json("calibration.json", &policies)?;

    let test_images = subsample(&test.samples, det.max_images);
    let test_x = eval_tensors(&test_images, &eval, &model.norm)?;
    let clean = score_all(&model, &test_x, &refs)?;
    let root = cfg.split_dir(&cfg.dataset.test_split);
    let paths: Vec<String> = test_images.iter().map(|s| display_path(&s.source_path, &root)).collect();
    let row = |s: &Scored, path: &str, eps: Option<f64>, source| Row {
        record: DetectionReport::new(s.scores, policy).record(path, eps),
        source,
        unknown_class: s.unknown_class,
    };
    let mut rows: Vec<Row> = clean
        .iter()
        .zip(&paths)
        .map(|(s, p)| row(s, p, None, Source::Clean))
        .collect();

    let k = model.num_classes();
    let mut per_eps = Vec::new();
    let mut roc_series = Vec::new();
    for &eps in &det.epsilons {
        let spec = AttackSpec {
            loss_target: cfg.attack.loss_target,
            clamp: cfg.attack.clamp,
            ..AttackSpec::fgsm(eps)
        };
        let adv_x: Vec<TensorImage> = test_x
            .par_iter()
            .zip(&test_images)
            .map(|(x, s)| {
                let truth = s.label.map(|l| LabelMap::single(l as u32, k));
                fgsm(&model, x, truth.as_ref(), &spec).map(|p| p.adversarial)
            })
            .collect::<advdet::Result<_>>()?;
        let adv = score_all(&model, &adv_x, &refs)?;
        let mut auroc = BTreeMap::new();
        for m in Metric::ALL {
            let roc = evaluate_detector(&metric_scores(&clean, m), &metric_scores(&adv, m))?;
            auroc.insert(m, roc.auroc);
            let name = format!("roc_{}_eps{}.csv", m.as_str(), eps_tag(eps));
            ctx.write_with(&name, ArtifactKind::RocCsv, |w| write_roc_csv(&roc.points, w))?;
            if m == det.metric {
                roc_series.push(Series {
                    name: format!("eps {eps} (AUROC {:.3})", roc.auroc),
                    points: roc.points.iter().map(|p| (p.fpr, p.tpr)).collect(),
                });
            }
        }
        info!("eps {eps}: AUROC {:?}", auroc);
        rows.extend(
            adv.iter()
                .zip(&paths)
                .map(|(s, p)| row(s, p, Some(eps), Source::Adversarial)),
        );
        per_eps.push(EpsilonSummary {
            epsilon: eps,
            images: adv.len(),
            auroc,
            flagged_fraction_clean: flagged_fraction(&clean, policy),
            flagged_fraction_adversarial: flagged_fraction(&adv, policy),
            unknown_class_adversarial: adv.iter().filter(|s| s.unknown_class).count(),
        });
    }

    let unknown_clean = clean.iter().filter(|s| s.unknown_class).count();
    if unknown_clean > 0 {
        warn!("{unknown_clean} clean test images predicted a class without reference features");
    }
    ctx.write_jsonl("detections.jsonl", &rows)?;
    let (_, svg) = ctx.artifact("roc.svg", ArtifactKind::Plot);
    line_chart(&svg, &format!("ROC ({})", det.metric), "false positive rate", "true positive rate", &roc_series)?;
    let summary = Summary {
        metric: det.metric,
        target_fpr: det.target_fpr,
        bandwidth: refs.bandwidth(),
        reference_vectors: refs.total(),
        calibration_images: calib_x.len(),
        calibration_flagged_fraction: flagged_fraction(&calib_scores, policy),
        test_images: test_x.len(),
        unknown_class_clean: unknown_clean,
        epsilons: per_eps,
    };
    ctx.write_json("detect_summary.json", &summary)?;
    ctx.finish()?;
    Ok(())
}
