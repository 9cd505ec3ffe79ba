use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite input or output of a model or step evaluation.
    #[error("evaluation domain error: {0}")]
    Domain(String),

    /// The implicit step matrix is singular or too ill-conditioned.
    #[error("step size too large: step matrix condition estimate {condition:.3e} exceeds {limit:.0e} at h = {h}; reduce h")]
    StepSize { h: f64, condition: f64, limit: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The operation is not available for this model or index.
    #[error("unsupported: {0}")]
    Capability(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("non-finite integrand value at node ({p}, {q})")]
    Integrand { p: f64, q: f64 },

    #[error("degenerate density: normalization integral {0:e} is below 1e-300")]
    DegenerateDensity(f64),

    #[error("realization {realization} blew up at step {step}: {source}")]
    Realization {
        realization: u64,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Strips `Step`/`Realization` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } | Error::Realization { source, .. } => source.root(),
            other => other,
        }
    }
}
