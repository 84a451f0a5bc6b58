use conformal_retrofit::Error as CoreError;
use thiserror::Error;

/// Command failures, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::ParseManifold(_) | CoreError::UnknownParameter(_) => CliError::Usage(msg),
            CoreError::InvalidPoint { .. }
            | CoreError::UndefinedLog(_)
            | CoreError::EigFailure { .. }
            | CoreError::NotSymmetric(_) => CliError::Numerical(msg),
            CoreError::Parse { .. }
            | CoreError::Io { .. }
            | CoreError::EmptyInput(_)
            | CoreError::SplitTooSmall(_)
            | CoreError::DimMismatch { .. }
            | CoreError::ManifoldMismatch { .. } => CliError::Data(msg),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("invalid JSON: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Wraps an I/O failure on `path` as a data error.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
