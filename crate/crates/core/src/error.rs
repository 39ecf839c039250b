use thiserror::Error;

/// Errors raised by simulation, estimation and fitting routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("potential value {value} at time {time} exceeds the declared bound {bound}")]
    PotentialOutOfBounds { value: f64, time: f64, bound: f64 },

    #[error("numerical blow-up: {0}")]
    NumericalBlowup(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("ill-conditioned fit (condition number {condition:.3e})")]
    FitDegenerate { condition: f64 },

    #[error("tolerance not met: {0}")]
    ToleranceNotMet(String),

    #[error("replica failed (N={n}, replica={replica}, seed={seed}): {source}")]
    ReplicaFailed {
        n: usize,
        replica: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
