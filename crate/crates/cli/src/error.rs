use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit codes, one per failure class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
    pub const CHECK_FAILED: u8 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cirm_core::Error),

    #[error("config file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: cirm_core::Error,
    },

    #[error("gradient check failed for {}", .0.join(", "))]
    CheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use cirm_core::Error as E;
        match self {
            CliError::ConfigFile { .. } => exit::CONFIG,
            CliError::Checkpoint { .. } => exit::CHECKPOINT,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Core(e) => match e {
                E::Config(_) => exit::CONFIG,
                E::Checkpoint(_) => exit::CHECKPOINT,
                E::Data(_) | E::Parse { .. } | E::Io { .. } | E::UnknownId(_) | E::Dimension { .. } | E::AllMasked { .. } => {
                    exit::DATA
                }
                _ => exit::OTHER,
            },
        }
    }
}

pub(crate) fn config_error(message: impl Into<String>) -> CliError {
    CliError::Core(cirm_core::Error::Config(message.into()))
}
