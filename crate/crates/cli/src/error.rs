//! Failure classes of the command line and their process exit codes.

use avatarbg_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Missing(String),

    #[error("{0}")]
    Contract(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 0 ok, 1 other runtime failure, 2 usage, 3 missing input,
    /// 4 contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Contract(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Json(_) => 2,
                CoreError::MissingSample(_) => 3,
                CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                CoreError::Io { .. } | CoreError::Csv { .. } => 1,
                _ => 4,
            },
        }
    }
}
