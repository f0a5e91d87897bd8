use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by the command-line harness to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot split {n} readings into {k} equal intervals")]
    Segmentation { n: usize, k: usize },

    #[error("degenerate embedding: zero-norm vector")]
    DegenerateEmbedding,

    #[error("pair sampling impossible: {0}")]
    Sampling(String),

    #[error("class {class} has no samples")]
    Coverage { class: usize },

    #[error("class {class} has a zero-norm center")]
    DegenerateCenter { class: usize },

    #[error("statistics unavailable: {0}")]
    Statistics(String),

    #[error("failed to load {}: {detail}", path.display())]
    Load { path: PathBuf, detail: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorKind::Usage,
            Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. }
            | Error::DegenerateEmbedding
            | Error::DegenerateCenter { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
