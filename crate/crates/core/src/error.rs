use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("token id {id} at position {position} is out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("attention in block {0} is already removed")]
    AttentionAlreadyRemoved(usize),

    #[error("cannot remove {requested} attentions, only {available} remain")]
    TooManyRemovals { requested: usize, available: usize },

    #[error(
        "infeasible sparsity {target:.4}: {detail} (theoretical maximum with {n_attn} attentions removed is {max:.4})"
    )]
    Infeasible {
        target: f64,
        n_attn: usize,
        max: f64,
        detail: String,
    },

    #[error("plan verification failed:\n{}", .0.join("\n"))]
    PlanMismatch(Vec<String>),

    #[error("bad format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that mean the requested sparsity cannot be reached.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible { .. })
    }
}
