pub mod dataset;
pub mod detect;
pub mod sweep;
pub mod train;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::CONFIG_FILE;

#[derive(Debug, Parser)]
#[command(name = "advdet", version, about = "Adversarial-input detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the linear head on a frozen backbone.
    Train(CommonArgs),
    /// FGSM epsilon sweep with segmentation-style metrics.
    Sweep(CommonArgs),
    /// Calibrate and evaluate the detection statistics.
    Detect(CommonArgs),
    /// Re-check a run directory against its manifest.
    Verify(CommonArgs),
    /// Write the synthetic shape dataset.
    MakeDataset(CommonArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// Experiment config (TOML). Defaults to `<output>/config.toml` when
    /// present, otherwise built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (the dataset directory for make-dataset).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides experiment.global_seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.output) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(out)) if out.join(CONFIG_FILE).is_file() => ExperimentConfig::load(&out.join(CONFIG_FILE))?,
            _ => ExperimentConfig::default(),
        };
        if let Some(out) = &self.output {
            cfg.experiment.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.experiment.global_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train::run(&a.resolve()?),
        Command::Sweep(a) => sweep::run(&a.resolve()?),
        Command::Detect(a) => detect::run(&a.resolve()?),
        Command::Verify(a) => verify::run(&a).map(|_| ()),
        Command::MakeDataset(a) => dataset::run(&a),
    }
}
