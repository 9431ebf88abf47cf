use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {0}")]
    MalformedHeader(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("zero-norm embedding: {0}")]
    ZeroNorm(String),

    #[error("no valid negatives: {0}")]
    NoNegatives(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("frozen parameters changed: {0}")]
    FrozenMutation(String),

    #[error("incompatible request: {0}")]
    Incompatible(String),

    #[error("malformed data: {0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
