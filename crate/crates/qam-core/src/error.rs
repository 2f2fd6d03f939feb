use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Config` covers malformed shapes/settings detected before any numerics run,
/// `Domain` covers numerically invalid inputs (non-finite values, nonpositive
/// precisions), and `Usage` covers API misuse such as consuming a tape twice.
#[derive(Debug, Error)]
pub enum QamError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training collapsed: {0}")]
    NanCollapse(String),

    #[error("checkpoint/data format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QamError {
    pub fn config(msg: impl Into<String>) -> Self {
        QamError::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        QamError::Domain(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        QamError::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, QamError>;
