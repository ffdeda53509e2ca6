use thiserror::Error;

use tensorgrad::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown agent id {0}")]
    UnknownAgent(usize),
    #[error("agent {from} requested a link to {to}, which is not a linkable neighbor")]
    NotNeighbor { from: usize, to: usize },
    #[error("agent {0} is not active but received an action")]
    InactiveAgent(usize),
    #[error("active agent {0} received no action")]
    MissingAction(usize),
    #[error("invalid action for agent {id}: {reason}")]
    InvalidAction { id: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scenario generation failed: {0}")]
    Scenario(String),
    #[error("policy manifest mismatch: {0}")]
    Manifest(String),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error("malformed log line {line}: {reason}")]
    Log { line: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
