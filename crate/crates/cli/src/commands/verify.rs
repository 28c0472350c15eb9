//! Re-checks a run directory: content hashes, file schemas, and the
//! epsilon = 0 identity row of the sweep.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use advdet::attack::{read_sweep_csv, Baseline, SWEEP_CSV_HEADER};
use advdet::detector::ROC_CSV_HEADER;
use advdet::metrics::ClassRow;
use advdet::model::{load_checkpoint, load_segmenter_checkpoint};
use advdet::{EpochLogRow, ReferenceSet};
use log::info;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_file, Artifact, ArtifactKind, RunManifest, CONFIG_FILE};

use super::CommonArgs;

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub path: String,
    pub problem: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checked: usize,
    pub failures: Vec<Finding>,
}

impl VerifyReport {
    fn fail(&mut self, path: &str, problem: impl Into<String>) {
        self.failures.push(Finding {
            path: path.into(),
            problem: problem.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Every record has as many numeric-or-empty fields as the header.
fn check_csv(path: &Path, header: &str, numeric_from: usize) -> Result<(), String> {
    let file = fs::File::open(path).map_err(|e| e.to_string())?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let found = rdr.headers().map_err(|e| e.to_string())?.iter().collect::<Vec<_>>().join(",");
    if found != header {
        return Err(format!("header {found:?}, expected {header:?}"));
    }
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("record {}: {e}", i + 1))?;
        for (j, cell) in rec.iter().enumerate().skip(numeric_from) {
            if !cell.is_empty() && cell.parse::<f64>().is_err() {
                return Err(format!("record {}, column {}: not a number: {cell:?}", i + 1, j + 1));
            }
        }
    }
    Ok(())
}

fn check_sweep(path: &Path, cfg: &ExperimentConfig) -> Result<(), String> {
    check_csv(path, SWEEP_CSV_HEADER, 0)?;
    let file = fs::File::open(path).map_err(|e| e.to_string())?;
    let rows = read_sweep_csv(BufReader::new(file)).map_err(|e| e.to_string())?;
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    if eps != cfg.attack.epsilons {
        return Err(format!("epsilon column {eps:?} does not match the config grid {:?}", cfg.attack.epsilons));
    }
    if cfg.attack.baseline == Baseline::Predictions {
        let zero = rows.iter().find(|r| r.epsilon == 0.0).ok_or("no epsilon = 0 row")?;
        if let Some(v) = zero.values().iter().find(|v| **v != Some(1.0)) {
            return Err(format!("epsilon = 0 row is not all ones (found {v:?})"));
        }
    }
    Ok(())
}

fn check_lines(path: &Path) -> Result<(), String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    for (i, line) in text.lines().enumerate() {
        serde_json::from_str::<serde_json::Value>(line).map_err(|e| format!("line {}: {e}", i + 1))?;
    }
    Ok(())
}

fn check_schema(run_dir: &Path, a: &Artifact, cfg: &ExperimentConfig) -> Result<(), String> {
    let path = run_dir.join(&a.path);
    let text = || fs::read_to_string(&path).map_err(|e| e.to_string());
    match a.kind {
        ArtifactKind::Checkpoint => {
            let as_classifier = load_checkpoint(&path).map(|_| ());
            as_classifier
                .or_else(|_| load_segmenter_checkpoint(&path).map(|_| ()))
                .map_err(|e| e.to_string())
        }
        ArtifactKind::ReferenceSet => ReferenceSet::load(&path).map(|_| ()).map_err(|e| e.to_string()),
        ArtifactKind::EpochLogCsv => {
            let file = fs::File::open(&path).map_err(|e| e.to_string())?;
            EpochLogRow::read_csv(BufReader::new(file)).map(|_| ()).map_err(|e| e.to_string())
        }
        ArtifactKind::SweepCsv => check_sweep(&path, cfg),
        ArtifactKind::PerClassCsv => check_csv(&path, ClassRow::CSV_HEADER, 0),
        ArtifactKind::RocCsv => check_csv(&path, ROC_CSV_HEADER, 0),
        ArtifactKind::Jsonl => check_lines(&path),
        ArtifactKind::Json => serde_json::from_str::<serde_json::Value>(&text()?)
            .map(|_| ())
            .map_err(|e| e.to_string()),
        ArtifactKind::Plot => match text()?.trim_start().starts_with("<svg") {
            true => Ok(()),
            false => Err("not an SVG document".into()),
        },
        ArtifactKind::Image => image::open(&path).map(|_| ()).map_err(|e| e.to_string()),
    }
}

/// Checks `run_dir` and itemizes every problem found.
pub fn verify_dir(run_dir: &Path) -> CliResult<VerifyReport> {
    let manifest = RunManifest::load(run_dir)?;
    let mut report = VerifyReport::default();
    let cfg_path = run_dir.join(CONFIG_FILE);
    let cfg = match ExperimentConfig::load(&cfg_path) {
        Ok(c) => c,
        Err(e) => {
            report.fail(CONFIG_FILE, e.to_string());
            return Ok(report);
        }
    };
    report.checked += 1;
    if cfg.hash() != manifest.config_hash {
        report.fail(CONFIG_FILE, "config hash differs from the manifest");
    }
    if manifest.stages.is_empty() {
        report.fail("manifest.json", "no stages recorded");
    }
    for (stage, a) in manifest.artifacts() {
        report.checked += 1;
        let path = run_dir.join(&a.path);
        match sha256_file(&path) {
            Err(_) => {
                report.fail(&a.path, format!("missing (recorded by stage {stage})"));
                continue;
            }
            Ok((sha, _)) if sha != a.sha256 => {
                report.fail(&a.path, format!("content hash {sha} does not match recorded {}", a.sha256));
            }
            Ok(_) => {}
        }
        if let Err(e) = check_schema(run_dir, a, &cfg) {
            report.fail(&a.path, e);
        }
    }
    Ok(report)
}

pub fn run_dir(args: &CommonArgs) -> CliResult<PathBuf> {
    if let Some(out) = &args.output {
        return Ok(out.clone());
    }
    match &args.config {
        Some(p) => Ok(ExperimentConfig::load(p)?.experiment.output_dir),
        None => Err(CliError::Config("verify needs --output <run dir> or --config".into())),
    }
}

pub fn run(args: &CommonArgs) -> CliResult<VerifyReport> {
    let dir = run_dir(args)?;
    let report = verify_dir(&dir)?;
    for f in &report.failures {
        println!("FAIL {}: {}", f.path, f.problem);
    }
    if !report.passed() {
        return Err(CliError::Validation(format!(
            "{} problem(s) in {}",
            report.failures.len(),
            dir.display()
        )));
    }
    info!("{} files verified", report.checked);
    println!("OK {} ({} files)", dir.display(), report.checked);
    Ok(report)
}
