use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value at index {index} of leaf tensor")]
    NonFinite { index: usize },
    #[error("head count {heads} does not divide model dimension {dim}")]
    HeadCount { heads: usize, dim: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new one")]
    TapeConsumed,
    #[error("function is not deterministic: {first} then {second} at identical parameters")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("missing embedding for pair ({subject}, {object}) in video {video} frame {frame}")]
    MissingEmbedding {
        video: String,
        frame: usize,
        subject: u32,
        object: u32,
    },
    #[error("no embedding for sentence {0:?}")]
    UnknownSentence(String),
    #[error("sequence of length {len} exceeds max temporal positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite {0}")]
    NonFiniteComponent(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("NaN loss at step {step}")]
    NanLoss { step: usize },
    #[error("inconsistent configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
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

    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
