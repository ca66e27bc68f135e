use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Prefixes the message while keeping the variant, so callers can still
    /// match on the failure kind. Wrapped source errors pass through as is.
    pub(crate) fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::DimensionMismatch(m) => Error::DimensionMismatch(format!("{ctx}: {m}")),
            Error::InvalidParameter(m) => Error::InvalidParameter(format!("{ctx}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{ctx}: {m}")),
            Error::Linalg(m) => Error::Linalg(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
