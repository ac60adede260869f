use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("episode already terminated; call reset first")]
    EpisodeDone,
    #[error("training failed: {0}")]
    TrainingFailed(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("live session closed")]
    SessionClosed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
