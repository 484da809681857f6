use thiserror::Error;

/// Errors produced anywhere in the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite state produced at step {step}")]
    NonFinite { step: usize },

    #[error("implicit solve did not converge after {iterations} iterations (residual {residual:e}); try a smaller step")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("reversal instability: non-finite augmented state at backward step {step}")]
    ReversalInstability { step: usize },

    #[error("training diverged at iteration {iter}: loss {loss:e}")]
    Divergence { iter: usize, loss: f64 },

    #[error("flow blow-up: particle {particle} became non-finite during stage {stage}")]
    FlowBlowUp { particle: usize, stage: usize },

    #[error("non-finite loss on task {task}")]
    NonFiniteLoss { task: usize },

    #[error("objective returned a non-finite value")]
    NonFiniteObjective,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
