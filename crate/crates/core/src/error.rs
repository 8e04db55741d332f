use thiserror::Error;

/// Errors raised by graph construction, problem setup and the solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("operation requires an {expected} graph")]
    GraphKind { expected: &'static str },
    #[error("degenerate push-sum weight {weight:e} at node {node}")]
    DegenerateWeight { node: usize, weight: f64 },
    #[error("objective is not strongly convex")]
    NotStronglyConvex,
    #[error("no geometric decay detected (fitted slope {slope})")]
    NoDecay { slope: f64 },
    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },
    #[error("oracle exceeded {iterations} iterations (kkt residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("trace is missing shadow inputs")]
    MissingShadow,
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
