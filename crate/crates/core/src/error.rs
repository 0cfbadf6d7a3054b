use alloc::string::String;

/// Errors produced by the estimation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource limit: {what} requires {requested}, cap is {cap}")]
    ResourceLimit {
        what: &'static str,
        requested: usize,
        cap: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cholesky factorization failed after jitter escalation (final jitter {jitter:e})")]
    CholeskyFailed { jitter: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("degenerate truth: the reference kernel has zero Hilbert-Schmidt norm on the sample")]
    DegenerateTruth,

    #[error("unsupported dimension {0}, only d = 2 is supported")]
    UnsupportedDimension(usize),

    #[error("all {0} cross-validation candidates failed")]
    AllCandidatesFailed(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
