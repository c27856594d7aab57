use thiserror::Error;

/// Errors raised across the rollout engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MedvrError {
    #[error("bounding box has zero area after clamping")]
    EmptyBox,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("no tool-span tokens observed yet")]
    NoToolTokens,
    #[error("consensus needs at least two successful trajectories, got {0}")]
    NoConsensus(usize),
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("r_tool = {0} granted to a trajectory with r_acc = 0")]
    InconsistentGate(f64),
    #[error("rollout budget violated: expected {expected} trajectories, produced {actual}")]
    BudgetViolation { expected: usize, actual: usize },
    #[error("policy unavailable: {0}")]
    PolicyUnavailable(String),
    #[error("protocol error [{code}]: {detail}")]
    Protocol { code: String, detail: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MedvrError {
    fn from(e: std::io::Error) -> Self {
        MedvrError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for MedvrError {
    fn from(e: serde_json::Error) -> Self {
        MedvrError::Io(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, MedvrError>;
