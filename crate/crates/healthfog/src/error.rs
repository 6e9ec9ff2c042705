use std::path::{Path, PathBuf};

/// Process exit codes shared by every subcommand.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NETWORK: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    /// Bad input from the operator: flags, payloads, config values.
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Network(String),
    #[error("{0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl ToString) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            Self::Io { .. } | Self::Internal(_) => EXIT_INTERNAL,
            Self::Format { .. } | Self::Invalid(_) => EXIT_USAGE,
            Self::Network(_) => EXIT_NETWORK,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
