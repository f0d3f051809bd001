use thiserror::Error;

/// Errors produced by the CCAD core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("training diverged at step {step}: {diagnostic}")]
    Divergence { step: usize, diagnostic: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            field,
            reason: reason.into(),
        }
    }
}
