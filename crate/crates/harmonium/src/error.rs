//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimensions of two operands disagree, or an input has an unusable shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input values are out of domain (non-finite, out of range).
    #[error("data error: {0}")]
    Data(String),

    /// A parameter or configuration value is unsupported.
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented precondition of an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Dataset construction failed; the message names the offending inputs.
    #[error("build error: {0}")]
    Build(String),

    /// A numeric computation left the finite domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
