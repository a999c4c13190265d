use thiserror::Error;

/// Errors raised anywhere in the sampler stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at graph node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("degenerate batch: need at least {needed} trajectories, got {got}")]
    DegenerateBatch { needed: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("trajectory {trajectory} diverged at step {step}")]
    Divergence { trajectory: usize, step: usize },

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("sinkhorn did not converge after {iterations} iterations (marginal residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training aborted at epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
