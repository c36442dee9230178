use dac_nn::NnError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DacError>;

#[derive(Debug, Error)]
pub enum DacError {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at diffusion step {step}")]
    NonFiniteStep { step: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed dataset at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error(
        "training diverged at step {step}: actor_loss={actor_loss}, critic_loss={critic_loss}, eta={eta}, C={scale}"
    )]
    Diverged { step: u64, actor_loss: f64, critic_loss: f64, eta: f64, scale: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
