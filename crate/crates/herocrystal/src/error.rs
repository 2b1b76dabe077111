use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes: config
/// problems exit with 2, anything else that aborts a stage exits with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("stage `{stage}` aborted: {reason}")]
    StageAbort { stage: String, reason: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn stage(stage: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::StageAbort {
            stage: stage.into(),
            reason: reason.into(),
        }
    }

    /// Exit code for the CLI surface: 2 for config errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
