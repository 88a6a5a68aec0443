use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation, config or path; exit code 2.
    #[error("{0}")]
    Usage(String),

    /// A check ran and failed; exit code 1.
    #[error("{0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] clarity_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) | CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
