use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Config file failed validation; `field` is a dotted path into the file.
    #[error("validation error at `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("judge error: {0}")]
    Judge(String),

    #[error(
        "too many judge failures: {quarantined} of {total} records quarantined (limit {limit:.3})"
    )]
    JudgeQuorum {
        quarantined: usize,
        total: usize,
        limit: f64,
    },

    #[error("context overflow: sequence needs {required} positions, context holds {context}")]
    ContextOverflow { required: usize, context: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidInput(format!($($arg)*))
    };
}
pub(crate) use invalid;
