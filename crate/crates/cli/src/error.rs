use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{failed} of {total} trials failed")]
    PartialFailure { failed: usize, total: usize },

    #[error("{0}")]
    Fatal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::PartialFailure { .. } => 3,
            CliError::Fatal(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Fatal(format!("{}: {err}", path.display()))
    }
}

impl From<imbalance_core::Error> for CliError {
    fn from(e: imbalance_core::Error) -> Self {
        match e {
            imbalance_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Fatal(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
