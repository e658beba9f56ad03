use std::path::PathBuf;

/// Errors produced by the rule engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input text. `location` is a human-readable position such as
    /// `line 4` or `template 2`.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("type error in column `{column}`: {message}")]
    Type { column: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown {what} `{name}` (known: {})", known.join(", "))]
    Resolution {
        what: &'static str,
        name: String,
        known: Vec<String>,
    },

    #[error("no statistic values could be computed for rule `{rule}`")]
    EmptyStatistic { rule: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported format version {found} in {what} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by numeric breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::EmptyStatistic { .. })
    }
}
