use thiserror::Error;

/// Command failures, each mapped to a process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] dcrf::Error),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Checkpoint { .. } => 2,
            CliError::Check(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
