use std::fmt;

use thiserror::Error;

/// Identifier of a data-holding center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CenterId(pub u32);

impl fmt::Display for CenterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("center holds no subjects")]
    EmptyCenter,
    #[error("accumulator holds no samples")]
    EmptyAccumulator,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("linear system is singular")]
    SingularSystem,
    #[error("no centers supplied")]
    NoCenters,
    #[error("ADMM produced non-finite values at iteration {iteration}; rho is probably misconfigured")]
    DivergenceDetected { iteration: usize },
    #[error("data matrix carries no variance")]
    DegenerateData,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    SpecError(String),
    #[error("phase {phase} timed out waiting for centers {missing:?}")]
    PhaseTimeout { phase: String, missing: Vec<CenterId> },
    #[error("{got} is not accepted in phase {phase}")]
    UnexpectedPhase { phase: String, got: String },
    #[error("duplicate message from center {0}")]
    DuplicateSender(CenterId),
    #[error("malformed wire data: {0}")]
    Wire(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::ShapeMismatch(what.into())
}
