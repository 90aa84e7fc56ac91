use std::path::PathBuf;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}:{line}: {message}")]
    ConfigAt { path: PathBuf, line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: checksum mismatch (manifest {expected}, file {actual})")]
    Checksum { path: PathBuf, expected: String, actual: String },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: ccl_core::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigAt { .. } | CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Checksum { .. } => EXIT_IO,
            CliError::Core { source, .. } => match source {
                ccl_core::Error::Numeric(_) => EXIT_NUMERIC,
                ccl_core::Error::Io { .. } | ccl_core::Error::Ingestion { .. } | ccl_core::Error::Decode { .. } => {
                    EXIT_IO
                }
                _ => EXIT_CONFIG,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attach run context to core errors.
pub trait Context<T> {
    fn context(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for ccl_core::Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Core {
            context: context(),
            source,
        })
    }
}
