use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum InpaintError {
    #[error("config error at {path}:{line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image file {path}: {msg}")]
    ImageFile { path: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl InpaintError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        InpaintError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, InpaintError>;
