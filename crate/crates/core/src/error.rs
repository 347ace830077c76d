use std::io;

use thiserror::Error;

/// Errors raised by the eigenmodel toolkit.
#[derive(Debug, Error)]
pub enum GemError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: String, found: String },

    #[error("basis {basis} is rank deficient at component {component}")]
    RankDeficient { basis: String, component: usize },

    #[error("triangle {triangle} is degenerate")]
    DegenerateTriangle { triangle: usize },

    #[error("image is {width}x{height}, the SSIM window needs at least 11x11")]
    ImageTooSmall { width: usize, height: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parse failures for the binary and text formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
}

pub type Result<T, E = GemError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> GemError {
    GemError::InvalidInput(msg.into())
}

pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> GemError {
    GemError::Format(FormatError::Malformed {
        what,
        detail: detail.into(),
    })
}
