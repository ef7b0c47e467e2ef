use std::path::PathBuf;

use semrec::ErrorClass;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] semrec::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("stale artifact {path}: {message}")]
    Stale { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Some units of a multi-part run failed; the rest completed.
    #[error("partial failure: {0}")]
    Partial(String),
    #[error("{0}")]
    Other(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 other, 2 config, 3 data, 4 numeric divergence (including
    /// a scaling run where some fraction failed).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Divergence => 4,
            },
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Stale { .. } | CliError::Io { .. } => 3,
            CliError::Partial(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}
