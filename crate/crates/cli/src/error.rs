use genrec_core::Error as CoreError;
use thiserror::Error;

/// Exit classes: 1 usage, 2 data, 3 numeric.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Json(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(CoreError::Config(_)) => 1,
            CliError::Core(CoreError::Input(_) | CoreError::Format(_) | CoreError::Io(_) | CoreError::Json(_))
            | CliError::File { .. }
            | CliError::Csv(_) => 2,
            CliError::Core(
                CoreError::Numeric { .. }
                | CoreError::NonFiniteLoss { .. }
                | CoreError::DegenerateFit(_)
                | CoreError::Internal(_),
            ) => 3,
        }
    }
}
