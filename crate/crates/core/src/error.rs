use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("relative distance must be non-negative, got {0}")]
    NegativeDistance(i64),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("input of length {input} does not need chunking (first + last = {minimum})")]
    InputTooShort { input: usize, minimum: usize },

    #[error("cache indices must be strictly increasing: got {next} after {last}")]
    NonMonotonicIndex { last: usize, next: usize },

    #[error("value {value} lies outside the invertible position range 1..={t_max}")]
    NotInvertible { value: f64, t_max: usize },

    #[error("empty input")]
    EmptyInput,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Short stable identifier, used for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NegativeDistance(_) => "negative_distance",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::UnknownToken { .. } => "unknown_token",
            Error::InputTooShort { .. } => "input_too_short",
            Error::NonMonotonicIndex { .. } => "non_monotonic_index",
            Error::NotInvertible { .. } => "not_invertible",
            Error::EmptyInput => "empty_input",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
