use std::fmt;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs; exit code 1.
    Validation(String),
    /// Anything that went wrong while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dualrl::Error> for CliError {
    fn from(e: dualrl::Error) -> Self {
        use dualrl::Error as E;
        match e {
            E::InvalidInput(_) | E::DimensionMismatch { .. } | E::Checkpoint(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<dualrl_service::ServiceError> for CliError {
    fn from(e: dualrl_service::ServiceError) -> Self {
        use dualrl_service::ServiceError as S;
        match e {
            S::Validation(_) | S::Protocol(_) | S::Conflict(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
