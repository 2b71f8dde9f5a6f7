use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A construction parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Vector or matrix dimensions do not match the expected layout.
    #[error("layout mismatch: {0}")]
    Layout(String),

    /// A requested window or depth does not fit the available data.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Random system generation failed to produce a valid instance.
    #[error("system generation failed: {0}")]
    Generation(String),

    /// A message-passing round did not deliver the expected payloads.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(
        "primal-dual iteration diverged at round {round} (residual {residual:e}); \
         step size h = {step_size:e} is likely too large"
    )]
    Divergence {
        round: usize,
        residual: f64,
        step_size: f64,
    },

    /// The constrained problem has no feasible point.
    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("fixture format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
