use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image {path:?}: {reason}")]
    InvalidImage { path: String, reason: String },

    #[error("expected {expected} channels, found {found}")]
    ChannelCount { expected: usize, found: usize },

    #[error("tensor is not normalized")]
    NotNormalized,

    #[error("tensor is already denormalized")]
    AlreadyDenormalized,

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {num_classes} classes in sample {path:?}")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        path: String,
    },

    #[error("sample {path:?} has no label")]
    MissingLabel { path: String },

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("checkpoint format error in {path:?}: {reason} (expected format version {expected_version})")]
    Checkpoint {
        path: PathBuf,
        reason: String,
        expected_version: u32,
    },

    #[error("reference set format error in {path:?}: {reason} (expected format version {expected_version})")]
    ReferenceFile {
        path: PathBuf,
        reason: String,
        expected_version: u32,
    },

    #[error("epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),

    #[error("epsilon grid must be sorted ascending and start at 0.0: {0:?}")]
    InvalidEpsilonGrid(Vec<f64>),

    #[error("class {0} has no reference features (untrained or unknown class)")]
    UnknownClass(usize),

    #[error("need at least {required} calibration scores, got {found}")]
    TooFewCalibrationScores { required: usize, found: usize },

    #[error("target false-positive rate must lie in (0, 1), got {0}")]
    InvalidTargetFpr(f64),

    #[error("prediction sets cover different images: {0}")]
    MismatchedImageSets(String),

    #[error("malformed dataset: {reason}: {paths:?}")]
    InvalidDataset { reason: String, paths: Vec<String> },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path:?}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
