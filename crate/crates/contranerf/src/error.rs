use std::path::PathBuf;

/// Exit status for configuration and user errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Invalid configuration, usually anchored to a file line.
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but does not have the expected layout.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] contranerf_core::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(
                contranerf_core::Error::Numerical(_) | contranerf_core::Error::NonFinite(_),
            ) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        AppError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

/// Attaches the path to an IO error.
pub trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| AppError::Io {
            path: path.into(),
            source,
        })
    }
}
