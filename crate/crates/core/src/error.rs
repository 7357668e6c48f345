use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PcpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PcpError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("model format: {0}")]
    Format(String),

    #[error("checksum mismatch: manifest records {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("no layer can lose another channel after {iterations} iterations (ratio {ratio:.4})")]
    NoProgress { iterations: usize, ratio: f64 },

    #[error("iteration limit {limit} reached at ratio {ratio:.4}")]
    IterationLimit { limit: usize, ratio: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl PcpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PcpError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        PcpError::Json {
            path: path.into(),
            source,
        }
    }
}
