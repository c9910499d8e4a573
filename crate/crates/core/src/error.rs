use thiserror::Error;

/// Errors raised across the navigation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    InvalidGridSpec(String),

    #[error("non-monotonic step: got {got}, graph is at {current}")]
    NonMonotonicStep { got: u32, current: u32 },

    #[error("node id mismatch between feature sets: {0}")]
    NodeMismatch(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },

    #[error("target {0} is not in the step's target set")]
    MissingTarget(String),

    #[error("goal blocked")]
    GoalBlocked,

    #[error("start blocked")]
    StartBlocked,

    #[error("unreachable")]
    Unreachable,

    #[error("malformed scene: {0}")]
    MalformedScene(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
