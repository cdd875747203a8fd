use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero norm")]
    ZeroNorm,

    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("bank layout: {0}")]
    Layout(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
