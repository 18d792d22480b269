//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Esm2Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("calibration failed: target rate {target} unreachable within bias bracket [{lo}, {hi}]")]
    Calibration { target: f64, lo: f64, hi: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("label consistency violated at {path}:{line}: {msg}")]
    LabelConsistency {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sparse bucket {bucket} out of range for field {field} (vocab size {vocab})")]
    BucketOutOfRange {
        field: usize,
        bucket: usize,
        vocab: usize,
    },

    #[error("non-finite gradient in {0}; aborting")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("GAUC undefined: no group has both a positive and a negative sample")]
    NoRetainableGroup,

    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint/dataset incompatible: {0}")]
    Incompatible(String),
}

impl Esm2Error {
    /// Process exit code contract: 1 for validation errors (bad config,
    /// malformed input, incompatible artifacts), 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Esm2Error::InvalidConfig(_)
            | Esm2Error::Parse { .. }
            | Esm2Error::LabelConsistency { .. }
            | Esm2Error::EmptyDataset(_)
            | Esm2Error::ShapeMismatch(_)
            | Esm2Error::BucketOutOfRange { .. }
            | Esm2Error::CheckpointVersion { .. }
            | Esm2Error::CheckpointCorrupt(_)
            | Esm2Error::Incompatible(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Esm2Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Esm2Error>;
