//! Command-line harness: config-driven training, attack sweeps, detection
//! runs and run verification.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod run;

pub use commands::{run as run_command, Cli, Command, CommonArgs};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
