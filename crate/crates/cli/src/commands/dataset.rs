use std::path::PathBuf;

use advdet::synth::write_dataset;
use log::info;

use super::CommonArgs;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Writes the synthetic dataset to `--output` (default `data/synthetic`).
/// Only the `[synthetic]` section and the seed of the config are used.
pub fn run(args: &CommonArgs) -> CliResult<()> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.synthetic.validate()?;
    let seed = args.seed.unwrap_or(cfg.experiment.global_seed);
    let root = args.output.clone().unwrap_or_else(|| PathBuf::from("data/synthetic"));
    let files = write_dataset(&cfg.synthetic, &root, seed)?;
    let meta = serde_json::json!({
        "seed": seed,
        "synthetic": cfg.synthetic,
        "files": files.len(),
    });
    let path = root.join("dataset.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("serializable") + "\n")
        .map_err(|e| CliError::io(&path, e))?;
    info!("wrote {} files under {}", files.len(), root.display());
    Ok(())
}
