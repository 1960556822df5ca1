use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive precision {0}: the distribution is not normalizable")]
    NonPositivePrecision(f64),

    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),

    #[error("criterion {0} has no stopping rule; a pruning budget is required")]
    MissingBudget(&'static str),

    #[error("score list mixes criteria: expected {expected}, found {found}")]
    MixedCriteria {
        expected: &'static str,
        found: &'static str,
    },

    #[error("architecture unsupported in this mode: {0}")]
    ArchitectureUnsupported(String),

    #[error("parameter (layer {layer}, index {index}) is already pruned")]
    AlreadyPruned { layer: usize, index: usize },

    #[error("unknown parameter (layer {layer}, index {index})")]
    UnknownParameter { layer: usize, index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("VFE became non-finite at epoch {epoch}; try lowering the learning rate")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("training column {column} has zero variance")]
    DegenerateColumn { column: usize },

    #[error("series of length {len} is too short for windows of {window}")]
    SeriesTooShort { len: usize, window: usize },

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unknown dataset {0}")]
    UnknownDataset(String),

    #[error("unsupported snapshot: {0}")]
    Snapshot(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
