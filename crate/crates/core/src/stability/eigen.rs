use nalgebra::{Cholesky, DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{DdclError, Result};
use crate::numerics::Matrix;

const EIGEN_EPS: f64 = 1e-14;
const MAX_SWEEPS: usize = 10_000;

fn square(a: &Matrix, context: &'static str) -> Result<DMatrix<f64>> {
    if a.rows() != a.cols() {
        return Err(DdclError::DimensionMismatch { context, expected: a.rows(), got: a.cols() });
    }
    if !a.is_finite() {
        return Err(DdclError::NonFinite(context));
    }
    Ok(a.to_dmatrix())
}

/// Eigenvalues `(re, im)` of a general square matrix, sorted by real part
/// then imaginary part.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<(f64, f64)>> {
    let m = square(a, "eigenvalues")?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(m, EIGEN_EPS, MAX_SWEEPS).ok_or(DdclError::NoConvergence(n))?;
    let mut ev: Vec<(f64, f64)> = schur.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(ev)
}

/// Eigenvalues of the symmetric part `(A + Aᵀ)/2`, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    let m = square(a, "symmetric_eigenvalues")?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, EIGEN_EPS, MAX_SWEEPS).ok_or(DdclError::NoConvergence(n))?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Cholesky test on `(A + Aᵀ)/2`. A positive-definite symmetric part forces
/// every eigenvalue of `A` to have a positive real part.
pub fn symmetric_part_is_pd(a: &Matrix) -> Result<bool> {
    let m = square(a, "symmetric_part_is_pd")?;
    if m.nrows() == 0 {
        return Ok(true);
    }
    Ok(Cholesky::new((&m + m.transpose()) * 0.5).is_some())
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    if !a.is_finite() {
        return Err(DdclError::NonFinite("spectral_norm"));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(0.0);
    }
    let m = a.to_dmatrix();
    let ata = m.transpose() * &m;
    let n = ata.nrows();
    // a fixed non-symmetric start vector avoids orthogonality to the top
    // singular vector for structured inputs
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..MAX_SWEEPS {
        let w = &ata * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = w / norm;
        let converged = (norm - lambda).abs() <= 1e-14 * norm;
        lambda = norm;
        v = next;
        if converged {
            return Ok(lambda.sqrt());
        }
    }
    Err(DdclError::NoConvergence(n))
}
