use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] more_core::Error),

    #[error("cannot write to {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} oracle check(s) failed")]
    OracleFailed { failed: usize },
}

impl CliError {
    /// Process exit status: 2 bad configuration, 3 numeric failure,
    /// 4 output not writable, 1 failed oracle checks.
    pub fn exit_code(&self) -> u8 {
        use more_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_) | E::Parse(_)) => 2,
            CliError::Core(E::Io(_)) | CliError::Output { .. } => 4,
            CliError::Core(_) => 3,
            CliError::OracleFailed { .. } => 1,
        }
    }
}
