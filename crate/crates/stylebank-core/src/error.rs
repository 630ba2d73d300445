//! One error type for the whole crate. Callers that only care about "did it
//! work" can bubble it; the CLI maps every variant to a nonzero exit.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dataset directory matched no loadable images.
    #[error("dataset at `{0}` contains no images matching the glob")]
    DatasetEmpty(PathBuf),

    /// A matched file could not be decoded as PNG/JPEG.
    #[error("failed to decode image `{path}`: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    /// Checkpoint written by an incompatible schema.
    #[error("checkpoint schema version mismatch: file has {found}, this build reads {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    /// Stored checksum does not match the entry's bytes.
    #[error("checkpoint entry `{name}` failed its checksum; the file is corrupt")]
    ChecksumMismatch { name: String },

    /// Structurally broken checkpoint (bad magic, truncated, shape/len disagreement).
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    /// Components that must have been trained against the same frozen
    /// backbone (bank vs. adapter) disagree about it.
    #[error("component mismatch: {0}")]
    ComponentMismatch(String),

    /// Numerical failure (non-finite values, impossible matrix decomposition).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for the most common rejection.
pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
