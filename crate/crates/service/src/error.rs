use crate::protocol::Phase;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("resting in {phase:?} for another {retry_after_ms} ms")]
    Resting { phase: Phase, retry_after_ms: u64 },
    #[error(transparent)]
    Core(#[from] dualrl::Error),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
