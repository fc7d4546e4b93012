use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("disconnected phase: {0}")]
    DisconnectedPhase(String),
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("missing solution: {0}")]
    MissingSolution(String),
    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("kernel grid mismatch: {0}")]
    KernelGridMismatch(String),
    #[error("zero gradient: {0}")]
    ZeroGradient(String),
    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by bad input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::ConstraintViolation(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::ResolutionMismatch(_)
                | Error::DisconnectedPhase(_)
                | Error::HashMismatch(_)
                | Error::IncompatibleRuns(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
