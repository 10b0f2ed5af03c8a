use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum MmfError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("GMRES did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    Solver { iterations: usize, residual: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MmfError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmfError::Config(_) => 2,
            MmfError::State(_) | MmfError::Shape(_) | MmfError::Solver { .. } => 3,
            MmfError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, MmfError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MmfError::Config(msg.into()))
}
