use std::fmt;

/// Everything that can go wrong inside the numerical core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver diverged at iteration {iteration}: residual {residual:.3e} (best {best:.3e})")]
    Diverged { iteration: usize, residual: f64, best: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("level set is not graphical: {0}")]
    NotGraphical(String),

    #[error("gradient of u drops to {gradient:.3e} on the level set near node {node:?}")]
    Degenerate { gradient: f64, node: Vec<usize> },

    #[error("scope gate at scale 2^{scale}: {reason}")]
    ScopeGate { scale: i32, reason: GateReason },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Why the flatness iteration refused to continue.
#[derive(Debug, Clone, PartialEq)]
pub enum GateReason {
    ExcessTooLarge { excess: f64, threshold: f64 },
    SheetCountMismatch { expected: usize, found: usize },
    NotGraphical(String),
    TooFewSamples(usize),
}

impl fmt::Display for GateReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateReason::ExcessTooLarge { excess, threshold } => {
                write!(f, "excess {excess:.4e} exceeds threshold {threshold:.4e}")
            }
            GateReason::SheetCountMismatch { expected, found } => {
                write!(f, "expected {expected} sheets, found {found}")
            }
            GateReason::NotGraphical(s) => write!(f, "not graphical: {s}"),
            GateReason::TooFewSamples(n) => write!(f, "only {n} samples in annulus"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
