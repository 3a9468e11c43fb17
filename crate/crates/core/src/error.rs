use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("unknown split \"{0}\"")]
    UnknownSplit(String),

    #[error("duplicate path {0}")]
    DuplicatePath(String),

    #[error("unsupported sample rate {0} Hz")]
    UnsupportedSampleRate(u32),

    #[error("expected mono audio, found {0} channels")]
    NotMono(u16),

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class exhausted: label {0} has no segments")]
    ClassExhausted(u8),

    #[error(
        "insufficient speakers: batch of {needed} needs distinct speakers but pool has {available}"
    )]
    InsufficientSpeakers { needed: usize, available: usize },

    #[error("degenerate clustering; re-run kmeans_fit with a new seed (cluster {0} is empty)")]
    DegenerateClustering(usize),

    #[error("segment {0} has no pseudo label")]
    MissingPseudoLabel(usize),

    #[error("computation graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
