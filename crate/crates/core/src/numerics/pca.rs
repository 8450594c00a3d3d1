use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{DdclError, Result};

use super::matrix::{dot, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `m_out × d`, orthonormal rows in decreasing-variance order.
    pub components: Matrix,
    /// Per-component variances (sample covariance eigenvalues).
    pub variances: Vec<f64>,
    pub explained_variance_ratio: f64,
}

/// Fit a PCA by eigendecomposition of the `d × d` sample covariance.
///
/// Each component is sign-normalised so that its largest-magnitude entry is
/// positive.
pub fn pca_fit(x: &Matrix, m_out: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if m_out == 0 || m_out > d {
        return Err(DdclError::invalid(
            "m_out",
            format!("must be in 1..={d}, got {m_out}"),
        ));
    }
    if n <= m_out {
        return Err(DdclError::invalid(
            "m_out",
            format!("need more samples ({n}) than components ({m_out})"),
        ));
    }
    let mean = x.column_means();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in x.row_iter() {
        for (c, (v, m)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * d as f64 * 1e-12;
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > tol && eig.eigenvalues[i] > 0.0)
        .count();
    if rank < m_out {
        return Err(DdclError::RankDeficient {
            rank,
            requested: m_out,
        });
    }

    let mut components = Matrix::zeros(m_out, d);
    let mut variances = Vec::with_capacity(m_out);
    for (row, &idx) in order.iter().take(m_out).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let (mut pivot, mut best) = (0, -1.0);
        for (j, val) in v.iter().enumerate() {
            if val.abs() > best {
                best = val.abs();
                pivot = j;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (j, val) in v.iter().enumerate() {
            components[(row, j)] = sign * val;
        }
        variances.push(eig.eigenvalues[idx].max(0.0));
    }

    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let kept: f64 = variances.iter().sum();
    let explained_variance_ratio = if total > 0.0 {
        (kept / total).clamp(0.0, 1.0)
    } else {
        0.0
    };

    Ok(PcaModel {
        mean,
        components,
        variances,
        explained_variance_ratio,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// `(X − mean) · componentsᵀ`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(DdclError::DimensionMismatch {
                context: "pca_project",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let m = self.output_dim();
        let mut out = Matrix::zeros(x.rows(), m);
        let mut centered = vec![0.0; self.input_dim()];
        for (i, r) in x.row_iter().enumerate() {
            for (c, (v, mu)) in centered.iter_mut().zip(r.iter().zip(&self.mean)) {
                *c = v - mu;
            }
            for j in 0..m {
                out[(i, j)] = dot(&centered, self.components.row(j));
            }
        }
        Ok(out)
    }

    /// Map projected coordinates back to the input space.
    pub fn reconstruct(&self, y: &Matrix) -> Result<Matrix> {
        if y.cols() != self.output_dim() {
            return Err(DdclError::DimensionMismatch {
                context: "pca_reconstruct",
                expected: self.output_dim(),
                got: y.cols(),
            });
        }
        let mut out = y.matmul(&self.components)?;
        for i in 0..out.rows() {
            for (v, mu) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *v += mu;
            }
        }
        Ok(out)
    }
}

pub fn pca_project(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    model.project(x)
}
