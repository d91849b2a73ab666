use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or inputs that violate a precondition.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("config file not found: {0}")]
    MissingFile(std::path::PathBuf),

    #[error("malformed config at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("missing required config key `{0}`")]
    MissingKey(String),

    /// Vector or matrix shapes that do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A metric that is not defined for the given inputs (e.g. AUC on one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training or analysis produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Process exit code: 1 for usage/config problems, 2 for runtime numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::MissingFile(_)
            | Error::Syntax { .. }
            | Error::UnknownKey(_)
            | Error::MissingKey(_)
            | Error::Dimension { .. }
            | Error::Json(_)
            | Error::Io(_) => 1,
            Error::UndefinedMetric(_) | Error::Numeric(_) | Error::Csv(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
