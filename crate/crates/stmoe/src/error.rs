use std::path::{Path, PathBuf};

pub type AppResult<T> = Result<T, AppError>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] stmoe_core::Error),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        match source.kind() {
            csv::ErrorKind::Io(_) => match source.into_kind() {
                csv::ErrorKind::Io(e) => AppError::io(path, e),
                _ => unreachable!(),
            },
            _ => {
                let line = source.position().map_or(0, |p| p.line());
                AppError::Row {
                    line,
                    message: source.to_string(),
                }
            }
        }
    }

    /// Process exit status: 2 for I/O and data-file problems, 3 for
    /// checkpoint or architecture mismatches, 64 for usage and configuration
    /// errors, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        use stmoe_core::Error as E;
        match self {
            AppError::Io { .. } | AppError::Csv { .. } | AppError::Row { .. } => 2,
            AppError::Checkpoint(_) | AppError::Mismatch(_) => 3,
            AppError::Usage(_) => 64,
            AppError::Core(E::Architecture(_) | E::UnknownParam(_)) => 3,
            AppError::Core(E::Config(_) | E::MaskRatio) => 64,
            AppError::Core(_) | AppError::Failed(_) => 1,
        }
    }
}
