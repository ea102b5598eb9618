use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlexError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-differentiable boundary: {0}")]
    NonDifferentiable(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FlexError> = std::result::Result<T, E>;
