use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("audit violation: {0}")]
    Audit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad data or schema rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
