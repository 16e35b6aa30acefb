use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({x:.3}, {y:.3}) lies outside the elevation map")]
    OutOfBounds { x: f64, y: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-physical vehicle parameters: {0}")]
    NonPhysicalParams(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("trajectory has fewer than two states")]
    EmptyTrajectory,

    #[error("feature {index} has near-zero variance {variance:e}")]
    DegenerateFeature { index: usize, variance: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("channel `{channel}` does not cover the window: {reason}")]
    InsufficientCoverage { channel: String, reason: String },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Usage => "UsageError",
            ErrorClass::Data => "DataError",
            ErrorClass::Numerical => "NumericalError",
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::ConfigInvalid(_) => ErrorClass::Usage,
            Error::DegenerateFeature { .. }
            | Error::SingularFit(_)
            | Error::InsufficientPoints { .. }
            | Error::NonPhysicalParams(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
