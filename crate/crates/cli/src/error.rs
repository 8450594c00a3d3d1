use ddcl_core::DdclError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Core(#[from] DdclError),

    #[error("invariant violated: {0}")]
    Violation(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// 2 for violated invariants, 1 for bad input or I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Violation(_) => 2,
            CliError::Core(e) if e.is_invariant_violation() => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
