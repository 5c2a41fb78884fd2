use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input documents or arguments that violate a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in {what}: expected {expected} bytes, found {actual}")]
    Shape {
        what: String,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value in {file} at byte offset {offset}")]
    NonFinite { file: String, offset: u64 },

    #[error("no expert covers domain {0}")]
    MissingExpert(String),

    #[error("no cost profile for device {device:?}, model {model:?}")]
    MissingProfile { device: String, model: String },

    #[error("malformed frame at byte {offset}: {reason}")]
    Frame { offset: usize, reason: String },

    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("{path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("at threshold {tau}: {source}")]
    AtThreshold {
        tau: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::FileIo {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than by the runtime
    /// environment. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        if let Error::AtThreshold { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Validation(_)
                | Error::Shape { .. }
                | Error::NonFinite { .. }
                | Error::MissingExpert(_)
                | Error::MissingProfile { .. }
                | Error::Json { .. }
        )
    }
}
