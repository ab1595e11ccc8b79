use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("bad magic: expected FLD1, found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("rank {0} exceeds the FLD1 limit of 4")]
    RankTooLarge(usize),

    #[error("image export: {0}")]
    Image(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("parameter alignment: {0}")]
    Alignment(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable short identifier used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::BadMagic { .. } => "bad_magic",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::UnknownDtype(_) => "unknown_dtype",
            Error::RankTooLarge(_) => "rank_too_large",
            Error::Image(_) => "image",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingGrad(_) => "missing_grad",
            Error::Alignment(_) => "alignment",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }
}
