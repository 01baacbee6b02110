use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("non-finite loss at iteration {iteration} (ray {ray})")]
    NonFinite { iteration: usize, ray: usize },

    #[error("training diverged at iteration {iteration}: loss {loss:e}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("SART diverged after sweep {sweep}: residual {residual:e} vs minimum {minimum:e}")]
    SartDiverged {
        sweep: usize,
        residual: f64,
        minimum: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by bad input (configs, files, flags) rather than
    /// by a computation going wrong.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Geometry(_)
                | Error::Config(_)
                | Error::Shape(_)
                | Error::Unsupported(_)
                | Error::Format { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
