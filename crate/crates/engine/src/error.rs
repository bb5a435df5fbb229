use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint closed")]
    Closed,
    #[error("timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("retries exhausted after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("http status {status} after {attempts} attempt(s): {body}")]
    Http { status: u16, body: String, attempts: u32 },
    #[error("invalid response after {attempts} attempt(s): {message}")]
    InvalidResponse { message: String, attempts: u32 },
}

impl GatewayError {
    pub fn attempts(&self) -> u32 {
        match self {
            GatewayError::InvalidRequest(_) | GatewayError::Closed => 0,
            GatewayError::Timeout { attempts }
            | GatewayError::Exhausted { attempts, .. }
            | GatewayError::Http { attempts, .. }
            | GatewayError::InvalidResponse { attempts, .. } => *attempts,
        }
    }
}

/// Failure of a whole pipeline stage.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("model: {0}")]
    Model(#[from] GatewayError),
    #[error("{0}")]
    Precondition(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Decode(String),
    #[error("{0}")]
    Failed(String),
}

/// Config problems, reported field by field.
#[derive(Debug, Error)]
#[error("invalid config:\n  {}", .problems.join("\n  "))]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    pub fn one(problem: impl Into<String>) -> Self {
        Self { problems: vec![problem.into()] }
    }
}
