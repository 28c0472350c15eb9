//! Run directory bookkeeping shared by the subcommands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use advdet::model::{load_checkpoint, load_segmenter_checkpoint};
use advdet::{ClassifierModel, SegmenterModel};
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, Select};
use crate::error::{CliError, CliResult};
use crate::manifest::{ArtifactKind, RunManifest, CONFIG_FILE};

pub const CHECKPOINT_LAST: &str = "train/checkpoint_last.ckpt";
pub const CHECKPOINT_BEST: &str = "train/checkpoint_best.ckpt";
pub const CHECKPOINT_SLICED: &str = "train/checkpoint_sliced2.ckpt";

pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    stage: String,
    started: Instant,
    files: Vec<(String, ArtifactKind)>,
}

impl RunContext {
    /// Creates the run directory and writes the config before anything
    /// else. A run directory already holding a different config is refused.
    pub fn start(cfg: &ExperimentConfig, stage: &str) -> CliResult<Self> {
        let dir = cfg.experiment.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let text = cfg.to_toml();
        let path = dir.join(CONFIG_FILE);
        if path.exists() {
            let existing = ExperimentConfig::load(&path)?;
            if existing != *cfg {
                return Err(CliError::Config(format!(
                    "{} holds a different config; use a fresh --output directory",
                    path.display()
                )));
            }
        } else {
            fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
        }
        let manifest = RunManifest::open(&dir, &cfg.hash())?;
        let stage_dir = dir.join(stage);
        fs::create_dir_all(&stage_dir).map_err(|e| CliError::io(&stage_dir, e))?;
        info!("{stage}: run directory {}", dir.display());
        Ok(RunContext {
            cfg: cfg.clone(),
            dir,
            manifest,
            stage: stage.into(),
            started: Instant::now(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// `<stage>/<name>`, registered as an artifact of the current stage.
    pub fn artifact(&mut self, name: &str, kind: ArtifactKind) -> (String, PathBuf) {
        let rel = format!("{}/{name}", self.stage);
        self.files.push((rel.clone(), kind));
        let abs = self.dir.join(&rel);
        (rel, abs)
    }

    /// Registers an artifact written outside the current stage's directory.
    pub fn register(&mut self, rel: &str, kind: ArtifactKind) {
        self.files.push((rel.into(), kind));
    }

    pub fn write_text(&mut self, name: &str, kind: ArtifactKind, text: &str) -> CliResult<PathBuf> {
        let (_, path) = self.artifact(name, kind);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.write_text(name, ArtifactKind::Json, &text)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<PathBuf> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r).expect("serializable"));
            text.push('\n');
        }
        self.write_text(name, ArtifactKind::Jsonl, &text)
    }

    pub fn write_with(
        &mut self,
        name: &str,
        kind: ArtifactKind,
        f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
    ) -> CliResult<PathBuf> {
        let (_, path) = self.artifact(name, kind);
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// Hashes everything the stage registered and saves the manifest.
    pub fn finish(mut self) -> CliResult<RunManifest> {
        let secs = self.started.elapsed().as_secs_f64();
        self.manifest.record_stage(&self.dir, &self.stage, secs, &self.files)?;
        self.manifest.save(&self.dir)?;
        info!("{}: {} artifacts in {secs:.1}s", self.stage, self.files.len());
        Ok(self.manifest)
    }

    pub fn selected_checkpoint(&self) -> PathBuf {
        self.path(match self.cfg.train.select {
            Select::Best => CHECKPOINT_BEST,
            Select::Last => CHECKPOINT_LAST,
        })
    }
}

fn require_checkpoint(path: &Path) -> CliResult<()> {
    if path.is_file() {
        return Ok(());
    }
    Err(CliError::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint not found at {}; run `advdet train` first", path.display()),
        ),
    ))
}

pub fn load_classifier(path: &Path) -> CliResult<ClassifierModel> {
    require_checkpoint(path)?;
    Ok(load_checkpoint(path)?)
}

pub fn load_segmenter(path: &Path) -> CliResult<SegmenterModel> {
    require_checkpoint(path)?;
    Ok(load_segmenter_checkpoint(path)?)
}

/// Fixed-width epsilon tag for file names.
pub fn eps_tag(eps: f64) -> String {
    format!("{eps:.3}")
}
