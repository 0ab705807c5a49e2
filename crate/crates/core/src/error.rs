use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid constraint spec: {0}")]
    InvalidConstraint(String),

    #[error("degenerate homography: {0}")]
    DegenerateHomography(String),

    #[error("image too small: need at least {need_w}x{need_h}, got {got_w}x{got_h}")]
    ImageTooSmall {
        need_w: usize,
        need_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("too few matches: need {need}, got {got}")]
    TooFewMatches { need: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("dataset is empty: {0}")]
    DatasetEmpty(PathBuf),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) | Error::InvalidConstraint(_) => "config",
            Error::ShapeMismatch(_) | Error::ImageTooSmall { .. } => "shape",
            Error::DatasetEmpty(_) => "dataset",
            Error::NonFiniteLoss { .. }
            | Error::DegenerateHomography(_)
            | Error::TooFewMatches { .. }
            | Error::Degenerate(_) => "numeric",
        }
    }
}
