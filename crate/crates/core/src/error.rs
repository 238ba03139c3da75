use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("cannot compare instances of different categories ({0} vs {1})")]
    CategoryMismatch(String, String),

    #[error("unknown category `{category}`; known categories: {known:?}")]
    UnknownCategory { category: String, known: Vec<String> },

    #[error("memory is empty")]
    EmptyMemory,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
