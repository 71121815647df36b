use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: cycle in differentiation graph")]
    GraphCycle,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank {rank} not below min(d, k) = {limit} for {path}")]
    RankTooLarge { path: String, rank: usize, limit: usize },

    #[error("base-model digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("training halted at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } | Error::Diverged { .. } => "numeric",
            Error::NotScalar(_) | Error::GraphCycle => "autodiff",
            Error::InvalidArgument(_) | Error::RankTooLarge { .. } => "argument",
            Error::DigestMismatch { .. } => "digest",
            Error::Format { .. } => "format",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
            Error::Io { .. } | Error::Image { .. } => "io",
            Error::Csv(_) | Error::Json(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
