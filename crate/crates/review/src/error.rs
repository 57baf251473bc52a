use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = ReviewError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error(transparent)]
    Core(#[from] sentropy_core::Error),

    #[error("{0}")]
    NotFound(String),

    #[error("missing or unknown reviewer token")]
    Unauthorized,

    #[error("annotation rejected: {}", .0.iter().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; "))]
    Validation(Vec<FieldError>),

    #[error("review set of {requested} requested but only {available} eligible questions")]
    TooLarge { requested: usize, available: usize },

    #[error("{0}")]
    Config(String),
}
