//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tokenizer, generator and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument fell outside its documented range.
    #[error("invalid range: {0}")]
    InvalidRange(String),

    /// Array shapes disagree with the operation's contract.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A timestep index was outside `[0, T)`.
    #[error("timestep out of range: {0}")]
    TimestepOutOfRange(String),

    /// A tensor contained NaN or infinite entries where finite values are required.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A dataset had no usable records.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A dataset path was missing or unreadable.
    #[error("missing dataset: {0}")]
    MissingDataset(String),

    /// Labels with fewer than two classes were given to a classifier.
    #[error("need at least two classes: {0}")]
    SingleClass(String),

    /// Checkpoint or cache file failed validation.
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    /// A persisted file declared an unsupported format version.
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    /// Stored parameter arrays disagree with the model configuration.
    #[error("checkpoint/config mismatch:\n{0}")]
    ShapeDiffs(String),

    /// Token cache digest does not match the tokenizer checkpoint it claims.
    #[error("token cache digest mismatch: cache built from {cache_digest}, tokenizer is {expected_digest}")]
    DigestMismatch {
        cache_digest: String,
        expected_digest: String,
    },

    /// Configuration document failed validation; message lists every violation.
    #[error("invalid configuration:\n{0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
