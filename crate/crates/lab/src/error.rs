use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// A caller handed us something that violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced non-finite values; carries diagnostics.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An internal invariant broke (e.g. the closed vocabulary leaked).
    #[error("internal error: {0}")]
    Internal(String),

    /// An expected file or checkpoint is not there.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
