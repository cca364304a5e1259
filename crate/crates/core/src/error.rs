use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("zero dimension: {0}")]
    ZeroDimension(&'static str),

    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("sequence of length {len} exceeds window {max}")]
    WindowOverflow { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("loss is NaN at step {step} (pair {pair})")]
    NanLoss { step: usize, pair: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for the CLI's machine-parsable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::ZeroDimension(_) => "zero_dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::WindowOverflow { .. } => "window_overflow",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config_violation",
            Error::Empty(_) => "empty_input",
            Error::Corrupt { .. } => "corrupt_file",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::NanLoss { .. } => "nan_loss",
            Error::MissingInput(_) => "missing_input",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
