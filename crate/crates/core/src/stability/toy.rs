use crate::error::{DdclError, Result};
use crate::layer::PrototypeBank;
use crate::numerics::{Matrix, SeededRng};

use super::hessian::{ParamSystem, Reduction};

/// Small linear-encoder system for Jacobian checks: `k` tight clusters
/// placed along the first input axis at evenly spaced positions in
/// `[-1, 1]`, a one-dimensional embedding `z = W x`, and one prototype per
/// cluster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySystemParams {
    pub k: usize,
    pub input_dim: usize,
    pub per_cluster: usize,
    pub spread: f64,
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for ToySystemParams {
    fn default() -> Self {
        Self { k: 2, input_dim: 2, per_cluster: 10, spread: 0.1, temperature: 0.5, lambda: 0.0 }
    }
}

pub fn toy_system(params: &ToySystemParams, seed: u64) -> Result<ParamSystem> {
    let ToySystemParams { k, input_dim: d, per_cluster, spread, temperature, lambda } = *params;
    if k < 2 || d == 0 || per_cluster == 0 {
        return Err(DdclError::invalid("toy system", "needs k >= 2, input_dim >= 1, per_cluster >= 1"));
    }
    let centre = |c: usize| -1.0 + 2.0 * c as f64 / (k - 1) as f64;
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(k * per_cluster * d);
    for c in 0..k {
        for _ in 0..per_cluster {
            data.push(centre(c) + spread * rng.normal());
            data.extend((1..d).map(|_| spread * rng.normal()));
        }
    }
    let x = Matrix::new(k * per_cluster, d, data)?;
    let mut w = Matrix::zeros(1, d);
    w.as_mut_slice()[0] = 1.0;
    let bank = PrototypeBank::new(Matrix::new(k, 1, (0..k).map(centre).collect())?)?;
    Ok(ParamSystem { x, w: Some(w), bank, t: temperature, lambda, reduction: Reduction::Mean })
}

/// Plain two-rate gradient descent, `θ ← θ − η_θ ∇_θ`, `P ← P − η_P ∇_P`,
/// until the gradient norm drops below `tol`. Returns the final system and
/// the number of steps taken.
pub fn descend_to_stationary(
    system: &ParamSystem,
    eta_theta: f64,
    eta_p: f64,
    tol: f64,
    max_steps: usize,
) -> Result<(ParamSystem, usize)> {
    let nt = system.n_theta();
    let mut point = system.point();
    for step in 0..=max_steps {
        let g = system.gradient_at(&point)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(DdclError::NonFiniteGradient("stationary descent"));
        }
        if norm < tol {
            return Ok((system.with_point(&point)?, step));
        }
        if step == max_steps {
            return Err(DdclError::NotStationary { iterations: max_steps, grad_norm: norm, tol });
        }
        for (i, (p, gi)) in point.iter_mut().zip(&g).enumerate() {
            *p -= if i < nt { eta_theta } else { eta_p } * gi;
        }
    }
    unreachable!()
}
