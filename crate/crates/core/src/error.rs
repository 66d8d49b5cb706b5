use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input is empty after normalization")]
    EmptyInput,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset alignment error: {0}")]
    Alignment(String),
    #[error("sequence of length {len} exceeds the maximum {max}")]
    Length { len: usize, max: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name of the variant, for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput => "empty_input",
            Error::Config(_) => "config",
            Error::UnknownToken(_) => "unknown_token",
            Error::Parse { .. } => "parse",
            Error::Alignment(_) => "alignment",
            Error::Length { .. } => "length",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
