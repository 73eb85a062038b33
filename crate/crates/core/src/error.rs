use std::path::PathBuf;

/// Errors surfaced by every layer of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sequence of {len} positions exceeds the context window of {window}")]
    LengthOverflow { len: usize, window: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown adaptor target: {0}")]
    UnknownTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("format version mismatch in {path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("no adaptor registered for group {0:?}")]
    AdaptorNotFound(String),

    #[error("retrieved passages span several groups: {0:?}")]
    MixedGroups(Vec<String>),

    #[error("unknown document {0:?}")]
    UnknownDocument(String),

    #[error("vector store is empty")]
    EmptyStore,

    #[error("missing summary archive for document {0:?}")]
    MissingArchive(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
