use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config file is missing, unreadable as TOML, or inconsistent.
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Core(#[from] mdc_core::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status: 2 config/usage, 3 numeric failure, 4 checksum, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use mdc_core::Error as E;
        match self {
            Self::Config { .. } | Self::Usage(_) => 2,
            Self::Core(E::InvalidConfig(_) | E::InvalidSpec(_)) => 2,
            Self::Core(E::Numeric(_)) => 3,
            Self::Core(E::Checksum { .. }) => 4,
            _ => 1,
        }
    }
}
