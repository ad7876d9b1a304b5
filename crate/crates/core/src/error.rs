use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid dimensions in {op}: {reason}")]
    Dimension { op: &'static str, reason: String },

    #[error("{0}")]
    Config(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config digest mismatch: artifact has {found}, requested model has {expected}")]
    DigestMismatch { found: String, expected: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short identifier, used as the machine-readable prefix of CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::Empty(_) => "empty",
            Error::Format(_) => "format",
            Error::DigestMismatch { .. } => "digest-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
