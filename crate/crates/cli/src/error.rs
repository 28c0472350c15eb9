use std::path::PathBuf;

use thiserror::Error;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Inputs or artifacts failed a check (exit code 1).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Unreadable or inconsistent configuration (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Filesystem failure (exit code 2).
    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] advdet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use advdet::Error as E;
        match self {
            CliError::Validation(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Io { .. }
                | E::Codec { .. }
                | E::Checkpoint { .. }
                | E::ReferenceFile { .. }
                | E::InvalidConfig(_)
                | E::NegativeEpsilon(_)
                | E::InvalidEpsilonGrid(_)
                | E::InvalidTargetFpr(_) => 2,
                _ => 1,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
