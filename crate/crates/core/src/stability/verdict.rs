use crate::error::{DdclError, Result};
use crate::numerics::Matrix;

use super::eigen::{eigenvalues, spectral_norm, symmetric_eigenvalues, symmetric_part_is_pd};
use super::hessian::HessianBlocks;

/// Eigenvalues with real part at or below this are not counted as stable.
const STABLE_RE_TOL: f64 = 1e-8;

/// `J* = [[η_θ H_θθ, η_θ H_θP], [η_P H_θPᵀ, η_P H_PP]]`.
pub fn assemble_jacobian(blocks: &HessianBlocks, eta_theta: f64, eta_p: f64) -> Matrix {
    let (nt, np) = (blocks.n_theta(), blocks.n_p());
    let mut j = blocks.full();
    for r in 0..nt + np {
        let rate = if r < nt { eta_theta } else { eta_p };
        for v in j.row_mut(r) {
            *v *= rate;
        }
    }
    j
}

/// `λ_min(H_PP) / (‖H_θP‖²/λ_min(H_θθ) + λ_max(H_PP))` with the spectral
/// norm. `None` when `H_θθ` is not positive definite or `H_PP` is empty.
pub fn sufficient_bound(blocks: &HessianBlocks) -> Result<Option<f64>> {
    let pp = symmetric_eigenvalues(&blocks.h_pp)?;
    let (Some(&pp_min), Some(&pp_max)) = (pp.first(), pp.last()) else {
        return Ok(None);
    };
    let coupling = if blocks.n_theta() == 0 {
        0.0
    } else {
        let tt_min = symmetric_eigenvalues(&blocks.h_tt)?[0];
        if !(tt_min > 0.0) {
            return Ok(None);
        }
        spectral_norm(&blocks.h_tp)?.powi(2) / tt_min
    };
    let denom = coupling + pp_max;
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some(pp_min / denom))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityVerdict {
    /// `min Re λ(J*)`.
    pub min_real_part: f64,
    pub stable: bool,
    pub sufficient_bound: Option<f64>,
    pub epsilon_used: f64,
    /// Cholesky succeeded on `(J* + J*ᵀ)/2`.
    pub symmetric_part_pd: bool,
    pub eigenvalues: Vec<(f64, f64)>,
    /// `ε < bound`, when a bound exists.
    pub satisfies_sufficient_condition: Option<bool>,
    /// `λ_min(H_PP)`, a proxy for the prototype-side strong convexity.
    pub mu_p_estimate: f64,
    /// `λ_max(H)`, a proxy for the smoothness constant.
    pub l_estimate: f64,
}

impl StabilityVerdict {
    /// Heuristic timescale-separation observation `ε·L < μ_P`.
    pub fn timescale_separated(&self) -> bool {
        self.epsilon_used * self.l_estimate < self.mu_p_estimate
    }
}

pub fn stability_verdict(
    jacobian: &Matrix,
    blocks: &HessianBlocks,
    eta_theta: f64,
    eta_p: f64,
) -> Result<StabilityVerdict> {
    let n = blocks.n_theta() + blocks.n_p();
    if jacobian.rows() != n || jacobian.cols() != n {
        return Err(DdclError::DimensionMismatch { context: "stability_verdict", expected: n, got: jacobian.rows() });
    }
    if !(eta_p > 0.0) {
        return Err(DdclError::invalid("eta_p", "must be > 0 to form the rate ratio"));
    }
    let eigenvalues = eigenvalues(jacobian)?;
    let min_real_part = eigenvalues.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
    let epsilon = eta_theta / eta_p;
    let bound = sufficient_bound(blocks)?;
    let pp = symmetric_eigenvalues(&blocks.h_pp)?;
    let full = symmetric_eigenvalues(&blocks.full())?;
    Ok(StabilityVerdict {
        min_real_part,
        stable: !eigenvalues.is_empty() && min_real_part > STABLE_RE_TOL,
        sufficient_bound: bound,
        epsilon_used: epsilon,
        symmetric_part_pd: symmetric_part_is_pd(jacobian)?,
        eigenvalues,
        satisfies_sufficient_condition: bound.map(|b| epsilon < b),
        mu_p_estimate: pp.first().copied().unwrap_or(0.0),
        l_estimate: full.last().copied().unwrap_or(0.0),
    })
}
