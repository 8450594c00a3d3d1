use thiserror::Error;

use crate::loss::LossReport;

pub type Result<T> = std::result::Result<T, DdclError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DdclError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("covariance is rank deficient: rank {rank} < requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },

    #[error("only {distinct} distinct points available for {k} clusters")]
    TooFewDistinct { distinct: usize, k: usize },

    #[error("prototype pair ({j}, {k}) at distance {distance:e} is below the repulsion guard {guard:e}")]
    RepulsionSingularity {
        j: usize,
        k: usize,
        distance: f64,
        guard: f64,
    },

    #[error("loss decomposition violated ({what}): {report}")]
    DecompositionViolation { what: String, report: LossReport },

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(&'static str),

    #[error("eigen-solver failed to converge on a {0}x{0} matrix")]
    NoConvergence(usize),

    #[error("gradient norm {grad_norm:e} still above {tol:e} after {iterations} steps")]
    NotStationary { iterations: usize, grad_norm: f64, tol: f64 },
}

impl DdclError {
    /// True when the error signals a violated mathematical invariant rather
    /// than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            DdclError::DecompositionViolation { .. }
                | DdclError::NonFiniteGradient(_)
                | DdclError::RepulsionSingularity { .. }
                | DdclError::NonFinite(_)
        )
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        DdclError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
