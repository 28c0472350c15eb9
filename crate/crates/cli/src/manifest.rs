//! `manifest.json`: what each stage wrote, with content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Checkpoint,
    ReferenceSet,
    EpochLogCsv,
    SweepCsv,
    PerClassCsv,
    RocCsv,
    Jsonl,
    Json,
    Plot,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub kind: ArtifactKind,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub toolkit_version: String,
    pub stages: BTreeMap<String, StageEntry>,
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            config_hash,
            toolkit_version: TOOLKIT_VERSION.into(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> CliResult<Self> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The run's manifest, or a fresh one. A manifest written under another
    /// config is an error.
    pub fn open(run_dir: &Path, config_hash: &str) -> CliResult<Self> {
        if !Self::path(run_dir).exists() {
            return Ok(Self::new(config_hash.into()));
        }
        let m = Self::load(run_dir)?;
        if m.config_hash != config_hash {
            return Err(CliError::Config(format!(
                "{} was written under a different config (hash {})",
                Self::path(run_dir).display(),
                m.config_hash
            )));
        }
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> CliResult<()> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Hashes `files` and records them as the stage's artifacts, replacing
    /// any earlier entry for the stage.
    pub fn record_stage(&mut self, run_dir: &Path, stage: &str, seconds: f64, files: &[(String, ArtifactKind)]) -> CliResult<()> {
        let mut artifacts = Vec::with_capacity(files.len());
        for (rel, kind) in files {
            let (sha256, bytes) = sha256_file(&run_dir.join(rel))?;
            artifacts.push(Artifact {
                path: rel.clone(),
                kind: *kind,
                sha256,
                bytes,
            });
        }
        self.stages.insert(
            stage.into(),
            StageEntry {
                wall_clock_seconds: seconds,
                artifacts,
            },
        );
        Ok(())
    }

    pub fn artifacts(&self) -> impl Iterator<Item = (&str, &Artifact)> {
        self.stages
            .iter()
            .flat_map(|(s, e)| e.artifacts.iter().map(move |a| (s.as_str(), a)))
    }
}
