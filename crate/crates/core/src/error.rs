use thiserror::Error;

/// Errors raised anywhere in the tracker stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid model, adapter or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad user-supplied data (boxes, images, sequences).
    #[error("input error: {0}")]
    Input(String),

    /// A metric has no frames to average over.
    #[error("undefined result: {0}")]
    Undefined(String),

    /// NaN or infinity escaped into a loss or gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Stored digest does not match the payload.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
