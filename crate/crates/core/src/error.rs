use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The posterior collapsed: all weights underflowed, or a spread the
    /// policy divides by is zero.
    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An input file was readable but not in the expected layout.
    #[error("malformed input: {0}")]
    Format(String),

    #[error("unknown policy `{id}` (available: {available})")]
    UnknownPolicy { id: String, available: String },

    #[error("duplicate policy id `{0}`")]
    DuplicatePolicy(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
