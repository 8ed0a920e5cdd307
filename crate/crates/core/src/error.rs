use thiserror::Error;

/// Errors surfaced by the shedder library.
///
/// Variants are grouped by who is at fault: `Input` for bad caller data,
/// `Config` for incompatible settings, `Training` for datasets that cannot
/// produce a model and `Io`/`Format` for persistence problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("processing latency not yet measured")]
    NotMeasured,

    #[error("empty utility history")]
    EmptyHistory,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the caller's inputs or configuration, as
    /// opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Input(_) | Error::Config(_) | Error::Training(_) | Error::Format(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
