use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

/// Malformed file content, located by byte offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub offset: u64,
    pub message: String,
}

impl FormatError {
    pub fn new(offset: u64, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for FormatError {}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad flag, config key or value.
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: format error {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    /// Failure inside the numerical core, with what was being done.
    #[error("{context}: {source}")]
    Core {
        context: String,
        source: painattn_core::Error,
    },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl AppError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn core(context: impl Into<String>, source: painattn_core::Error) -> Self {
        Self::Core {
            context: context.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 I/O or format, 3 numeric, 4 gradient check.
    pub fn exit_code(&self) -> i32 {
        use painattn_core::Error as E;
        match self {
            Self::Usage(_) => 1,
            Self::Io { .. } | Self::Format { .. } => 2,
            Self::Core { source, .. } => match source {
                E::Config(_) | E::Domain(_) => 1,
                _ => 3,
            },
            Self::GradCheck(_) => 4,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
