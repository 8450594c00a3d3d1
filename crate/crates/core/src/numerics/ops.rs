use crate::error::{DdclError, Result};
use crate::exec::{self, Backend};

use super::matrix::{sq_dist, Matrix};

/// Squared Euclidean distances `D[n][k] = ‖z_n − p_k‖²`, computed by
/// explicit expansion to avoid cancellation at small distances.
pub fn pairwise_sq_dists(z: &Matrix, p: &Matrix) -> Result<Matrix> {
    pairwise_sq_dists_with(Backend::default(), z, p)
}

pub fn pairwise_sq_dists_with(backend: Backend, z: &Matrix, p: &Matrix) -> Result<Matrix> {
    if z.cols() != p.cols() {
        return Err(DdclError::DimensionMismatch {
            context: "pairwise_sq_dists",
            expected: z.cols(),
            got: p.cols(),
        });
    }
    let k = p.rows();
    let mut out = Matrix::zeros(z.rows(), k);
    exec::fill_rows(backend, out.as_mut_slice(), k, |n, row| {
        let zn = z.row(n);
        for (j, d) in row.iter_mut().enumerate() {
            *d = sq_dist(zn, p.row(j));
        }
    });
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn stable_softmax_rows(a: &Matrix) -> Result<Matrix> {
    stable_softmax_rows_with(Backend::default(), a)
}

pub fn stable_softmax_rows_with(backend: Backend, a: &Matrix) -> Result<Matrix> {
    if a.as_slice().iter().any(|v| v.is_nan()) {
        return Err(DdclError::NonFinite("stable_softmax_rows"));
    }
    let k = a.cols();
    let mut out = a.clone();
    exec::fill_rows(backend, out.as_mut_slice(), k, |_, row| softmax_in_place(row));
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + bias` with population variance.
///
/// `eps = 0` is accepted; a constant input then maps to `bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    let m = x.len();
    if m == 0 {
        return Err(DdclError::EmptyInput("layer_norm"));
    }
    for (len, context) in [(gain.len(), "layer_norm gain"), (bias.len(), "layer_norm bias")] {
        if len != m {
            return Err(DdclError::DimensionMismatch {
                context,
                expected: m,
                got: len,
            });
        }
    }
    if !(eps >= 0.0) {
        return Err(DdclError::invalid("eps", format!("must be >= 0, got {eps}")));
    }
    let mean = x.iter().sum::<f64>() / m as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
    let denom = (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| {
            let centered = v - mean;
            let normed = if denom > 0.0 { centered / denom } else { 0.0 };
            g * normed + b
        })
        .collect())
}
