use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    /// A record violates a declared schema invariant. `locator` pins the
    /// offending record (file and line, or image id).
    #[error("schema violation at {locator}: {message}")]
    Schema { locator: String, message: String },

    #[error("non-finite feature value for image {image_id} at index {index}")]
    NonFinite { image_id: String, index: usize },

    #[error("annotation missing for image {image_id}: {what}")]
    AnnotationMissing {
        image_id: String,
        what: &'static str,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown external score {name:?}; available: {available:?}")]
    UnknownScore {
        name: String,
        available: Vec<String>,
    },

    #[error("missing feature row for image {0}")]
    MissingFeatures(String),

    #[error("{0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(locator: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            locator: locator.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    /// True for errors caused by bad data rather than bad arguments or I/O.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::InvalidInput(_))
    }
}
