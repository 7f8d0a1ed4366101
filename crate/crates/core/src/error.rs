use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward called before forward")]
    NoForwardPass,

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has {available} training samples, {requested} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("IDX format error in {path} at byte {offset}: {message}")]
    IdxFormat {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("SGD diverged at step {step}")]
    SgdDiverged { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("zero-trace Fisher diagonal cannot be normalized")]
    ZeroTrace,

    #[error("Fisher diagonal is not unit-trace normalized")]
    NotNormalized,

    #[error("network specs differ: {0}")]
    SpecMismatch(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("unknown task: {0}")]
    UnknownTask(String),

    #[error("{0}")]
    Search(String),

    #[error("nondeterminism detected: {0}")]
    Nondeterminism(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("cell format error at line {line}: {message}")]
    CellFormat { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NoForwardPass => "no_forward_pass",
            Error::EmptyData(_) => "empty_data",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::IdxFormat { .. } => "idx_format",
            Error::Diverged { .. } => "diverged",
            Error::SgdDiverged { .. } => "sgd_diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::ZeroTrace => "zero_trace",
            Error::NotNormalized => "not_normalized",
            Error::SpecMismatch(_) => "spec_mismatch",
            Error::NotPsd(_) => "not_psd",
            Error::UnknownTask(_) => "unknown_task",
            Error::Search(_) => "search",
            Error::Nondeterminism(_) => "nondeterminism",
            Error::Config { .. } => "config",
            Error::CellFormat { .. } => "cell_format",
            Error::Io(_) => "io",
        }
    }
}
