use thiserror::Error;

use crate::solver::JointSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The joint solver hit its iteration cap. The payload is the best
    /// feasible iterate, so callers can still inspect it.
    #[error(
        "joint solver did not converge after {iterations} iterations \
         (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e})"
    )]
    NotConverged {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
        best: Box<JointSolution>,
    },

    #[error("all bands pruned at zoom level {level}; lower tau or raise SNR")]
    AllBandsPruned { level: usize, band_powers: Vec<f64> },

    #[error("no active bands to refine")]
    NoActiveBands,

    #[error("requested {requested} peaks but only {} local maxima exist", found.len())]
    TooFewPeaks { requested: usize, found: Vec<f64> },

    #[error("Fisher matrix is singular; degenerate parameter {parameter}")]
    SingularFim { parameter: String },

    #[error("pseudo-true parameter search did not converge (gradient norm {gradient_norm:.3e})")]
    PseudoTrueNotConverged {
        gradient_norm: f64,
        best: Box<crate::signal::SinusoidModel>,
    },

    #[error("{failed} of {total} replicates failed (limit 5%)")]
    FailureBudget { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
