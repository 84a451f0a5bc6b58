use thiserror::Error;

/// Errors raised across the retrofitting library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid point on {manifold}: {reason}")]
    InvalidPoint { manifold: String, reason: String },

    #[error("manifold mismatch: {left} vs {right}")]
    ManifoldMismatch { left: String, right: String },

    #[error("logarithm undefined: {0}")]
    UndefinedLog(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("eigensolver did not converge after {sweeps} sweeps")]
    EigFailure { sweeps: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("split too small: {0}")]
    SplitTooSmall(String),

    #[error("cannot parse manifold `{0}`")]
    ParseManifold(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
