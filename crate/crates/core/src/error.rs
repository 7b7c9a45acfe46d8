use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CoinError>;

#[derive(Debug, thiserror::Error)]
pub enum CoinError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate embedding: row {row} has norm {norm:e} below 1e-12")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("batch too small: {op} needs at least {min} instances, got {got}")]
    BatchSize {
        op: &'static str,
        min: usize,
        got: usize,
    },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("invalid spec field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoinError {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        CoinError::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        CoinError::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        CoinError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoinError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than by the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CoinError::Validation { .. } | CoinError::Parse { .. } | CoinError::Parameter(_)
        )
    }
}
