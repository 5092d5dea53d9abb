use thiserror::Error;

/// Errors produced anywhere in the planning stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (shape, length, range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A primitive produced a non-finite value.
    #[error("non-finite value produced by `{op}` at tape node {node}")]
    Numerical { op: &'static str, node: usize },

    #[error("training diverged at epoch {epoch}{}", member.map(|m| format!(" (ensemble member {m})")).unwrap_or_default())]
    TrainingFailure { epoch: usize, member: Option<usize> },

    #[error("planning failed: {0}")]
    PlanningFailure(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("score undefined: {0}")]
    UndefinedScore(String),

    #[error("expert oracle failed: {0}")]
    ExpertFailure(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
