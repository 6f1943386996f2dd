use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(ValidationError),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical error: {message} (achieved error estimate {achieved:e})")]
    Numerical { message: String, achieved: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn argument(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }
}

/// Location and reason of a dataset invariant violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub trajectory: Option<usize>,
    pub step: Option<usize>,
    pub message: String,
}

impl ValidationError {
    pub fn dataset(message: impl Into<String>) -> Self {
        Self {
            trajectory: None,
            step: None,
            message: message.into(),
        }
    }

    pub fn trajectory(index: usize, message: impl Into<String>) -> Self {
        Self {
            trajectory: Some(index),
            step: None,
            message: message.into(),
        }
    }

    pub fn step(index: usize, step: usize, message: impl Into<String>) -> Self {
        Self {
            trajectory: Some(index),
            step: Some(step),
            message: message.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.trajectory, self.step) {
            (Some(t), Some(s)) => write!(f, "trajectory {t}, step {s}: {}", self.message),
            (Some(t), None) => write!(f, "trajectory {t}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

impl From<ValidationError> for Error {
    fn from(e: ValidationError) -> Self {
        Error::Validation(e)
    }
}
