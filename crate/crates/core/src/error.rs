use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity exceeded: {what} = {value} but {knob} = {limit}")]
    Capacity {
        what: &'static str,
        value: usize,
        knob: &'static str,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged in {module}: {message}")]
    Divergence {
        module: &'static str,
        message: String,
    },

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the `vic` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Labeling(_)
            | Error::Config(_)
            | Error::Capacity { .. }
            | Error::Shape(_)
            | Error::Version(_) => 2,
            Error::Io { .. } | Error::Serde(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }
}
