use std::io;
use std::path::{Path, PathBuf};

pub type AppResult<T> = Result<T, AppError>;

/// Application error. [`AppError::exit_code`] separates usage and
/// configuration problems (2) from runtime failures (1).
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: field `{field}`: {reason}", path.display())]
    Parse {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] canopy_core::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) => 2,
            AppError::Core(canopy_core::Error::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        AppError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        AppError::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }
}
