//! Competitive loss, its decomposition into soft reconstruction and
//! prototype-variance terms, and every analytic gradient the trainer needs.
//!
//! Losses and gradients follow the batch-mean convention (divide by `N`).
//! `sigma_q` and `separation_force` keep the summed form over tokens.

use std::fmt;

use crate::error::{DdclError, Result};
use crate::exec::{self, Backend};
use crate::layer::{distances_and_assignments, soft_centroids, AssignmentMatrix, PrototypeBank};
use crate::numerics::{sq_dist, Matrix};

/// Absolute floor used by the `V ≥ −1e-8` sanity assertion.
pub const VARIANCE_FLOOR: f64 = -1e-8;
/// Tolerance of the exact identity `L_q = L_soft + V_soft`, relative to
/// `max(1, |L_q|)`.
pub const IDENTITY_TOL: f64 = 1e-8;

/// Per-batch decomposition audit. All values are batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_q: f64,
    /// `mean_n min_k ‖z_n − p_k‖²`.
    pub l_ols: f64,
    /// `mean_n ‖z_n − μ_n‖²`.
    pub l_soft: f64,
    /// `mean_n Σ_k q_nk ‖p_k − μ_n‖²`.
    pub v_soft: f64,
    /// `L_q − L_OLS`.
    pub v_alg: f64,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L_q={:e} L_OLS={:e} L_soft={:e} V_soft={:e} V_alg={:e}",
            self.l_q, self.l_ols, self.l_soft, self.v_soft, self.v_alg
        )
    }
}

impl LossReport {
    /// `|L_q − (L_soft + V_soft)|`.
    pub fn identity_residual(&self) -> f64 {
        (self.l_q - (self.l_soft + self.v_soft)).abs()
    }

    pub fn check(&self) -> Result<()> {
        let fail = |what: &str| {
            Err(DdclError::DecompositionViolation {
                what: what.to_string(),
                report: *self,
            })
        };
        let vals = [self.l_q, self.l_ols, self.l_soft, self.v_soft, self.v_alg];
        if vals.iter().any(|v| !v.is_finite()) {
            return fail("non-finite loss component");
        }
        if self.v_soft < 0.0 {
            return fail("V_soft < 0");
        }
        if self.v_alg < VARIANCE_FLOOR {
            return fail("V_alg < -1e-8");
        }
        if self.identity_residual() > IDENTITY_TOL * self.l_q.abs().max(1.0) {
            return fail("L_q != L_soft + V_soft");
        }
        Ok(())
    }
}

/// Decomposition from already computed distances and assignments.
pub(crate) fn report_from(
    backend: Backend,
    z: &Matrix,
    bank: &PrototypeBank,
    d: &Matrix,
    q: &AssignmentMatrix,
    centroids: &Matrix,
) -> LossReport {
    let n = z.rows();
    let rows = exec::map_indices(backend, n, |i| {
        let (dn, qn, mu) = (d.row(i), q.row(i), centroids.row(i));
        let l_q: f64 = qn.iter().zip(dn).map(|(a, b)| a * b).sum();
        let l_ols = dn.iter().copied().fold(f64::INFINITY, f64::min);
        let l_soft = sq_dist(z.row(i), mu);
        let v_soft: f64 = qn
            .iter()
            .enumerate()
            .map(|(k, &w)| w * sq_dist(bank.prototype(k), mu))
            .sum();
        [l_q, l_ols, l_soft, v_soft]
    });
    let mut acc = [0.0; 4];
    for r in &rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let inv = 1.0 / n.max(1) as f64;
    let [l_q, l_ols, l_soft, v_soft] = acc.map(|v| v * inv);
    LossReport {
        l_q,
        l_ols,
        l_soft,
        v_soft,
        v_alg: l_q - l_ols,
    }
}

/// Compute every decomposition term from one evaluation of `Q` and check the
/// report's invariants.
pub fn decompose(z: &Matrix, bank: &PrototypeBank, t: f64) -> Result<LossReport> {
    let report = decompose_unchecked(z, bank, t)?;
    report.check()?;
    Ok(report)
}

/// As [`decompose`] but without asserting the invariants.
pub fn decompose_unchecked(z: &Matrix, bank: &PrototypeBank, t: f64) -> Result<LossReport> {
    if z.rows() == 0 {
        return Err(DdclError::EmptyInput("decompose"));
    }
    let backend = Backend::default();
    let (d, q) = distances_and_assignments(backend, z, bank, t)?;
    let mu = soft_centroids(&q, bank)?;
    Ok(report_from(backend, z, bank, &d, &q, &mu))
}

/// Mean competitive loss `L_q`.
pub fn competitive_loss(z: &Matrix, bank: &PrototypeBank, t: f64) -> Result<f64> {
    decompose_unchecked(z, bank, t).map(|r| r.l_q)
}

/// `Σ_q = Σ_n (diag(q_n) − q_n q_nᵀ)`, a symmetric PSD `K × K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaQ(pub Matrix);

impl SigmaQ {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn sigma_q(q: &AssignmentMatrix) -> SigmaQ {
    let k = q.k();
    let mut s = Matrix::zeros(k, k);
    for row in q.matrix().row_iter() {
        for i in 0..k {
            s[(i, i)] += row[i];
            for j in 0..k {
                s[(i, j)] -= row[i] * row[j];
            }
        }
    }
    SigmaQ(s)
}

/// Summed prototype-variance term `Σ_n Σ_k q_nk ‖p_k − μ_n‖²` with `Q`
/// treated as a constant.
pub fn variance_with_fixed_q(bank: &PrototypeBank, q: &AssignmentMatrix) -> Result<f64> {
    let mu = soft_centroids(q, bank)?;
    Ok(q.matrix()
        .row_iter()
        .zip(mu.row_iter())
        .map(|(qn, m)| {
            qn.iter()
                .enumerate()
                .map(|(k, w)| w * sq_dist(bank.prototype(k), m))
                .sum::<f64>()
        })
        .sum())
}

/// `∇_P V = 2 Σ_q P` (prototypes as rows), the gradient of
/// [`variance_with_fixed_q`].
pub fn separation_force(bank: &PrototypeBank, q: &AssignmentMatrix) -> Result<Matrix> {
    if q.k() != bank.k() {
        return Err(DdclError::DimensionMismatch {
            context: "separation_force",
            expected: bank.k(),
            got: q.k(),
        });
    }
    Ok(sigma_q(q).0.matmul(bank.matrix())?.scale(2.0))
}

pub(crate) fn grad_prototypes_from(
    backend: Backend,
    z: &Matrix,
    bank: &PrototypeBank,
    d: &Matrix,
    q: &AssignmentMatrix,
    t: f64,
    stop_gradient_on_q: bool,
) -> Matrix {
    let (n, k, m) = (z.rows(), bank.k(), bank.dim());
    let dbar: Vec<f64> = (0..n)
        .map(|i| q.row(i).iter().zip(d.row(i)).map(|(a, b)| a * b).sum())
        .collect();
    let scale = 2.0 / n.max(1) as f64;
    let mut g = Matrix::zeros(k, m);
    exec::fill_rows(backend, g.as_mut_slice(), m, |j, gj| {
        let pj = bank.prototype(j);
        for i in 0..n {
            let mut w = q.row(i)[j];
            if !stop_gradient_on_q {
                w *= 1.0 - (d[(i, j)] - dbar[i]) / t;
            }
            if w == 0.0 {
                continue;
            }
            for ((g, p), zv) in gj.iter_mut().zip(pj).zip(z.row(i)) {
                *g += w * (p - zv);
            }
        }
        gj.iter_mut().for_each(|v| *v *= scale);
    });
    g
}

/// Gradient of the mean loss `L_q` with respect to the prototypes.
///
/// With `stop_gradient_on_q` the assignments are constants and
/// `G[k] = (2/N) Σ_n q_nk (p_k − z_n)`; otherwise the softmax is
/// differentiated too, which multiplies each term by `1 − (d_nk − d̄_n)/T`.
pub fn grad_prototypes(
    z: &Matrix,
    bank: &PrototypeBank,
    t: f64,
    stop_gradient_on_q: bool,
) -> Result<Matrix> {
    grad_prototypes_with(Backend::default(), z, bank, t, stop_gradient_on_q)
}

pub fn grad_prototypes_with(
    backend: Backend,
    z: &Matrix,
    bank: &PrototypeBank,
    t: f64,
    stop_gradient_on_q: bool,
) -> Result<Matrix> {
    let (d, q) = distances_and_assignments(backend, z, bank, t)?;
    Ok(grad_prototypes_from(backend, z, bank, &d, &q, t, stop_gradient_on_q))
}

pub(crate) fn grad_embeddings_from(
    backend: Backend,
    z: &Matrix,
    bank: &PrototypeBank,
    d: &Matrix,
    q: &AssignmentMatrix,
    centroids: &Matrix,
    t: f64,
    stop_gradient_on_q: bool,
) -> Matrix {
    let (n, m) = z.shape();
    let scale = 1.0 / n.max(1) as f64;
    let mut g = Matrix::zeros(n, m);
    exec::fill_rows(backend, g.as_mut_slice(), m, |i, gi| {
        let (zi, mu, qi, di) = (z.row(i), centroids.row(i), q.row(i), d.row(i));
        for ((g, zv), mv) in gi.iter_mut().zip(zi).zip(mu) {
            *g = 2.0 * (zv - mv);
        }
        if !stop_gradient_on_q {
            let dbar: f64 = qi.iter().zip(di).map(|(a, b)| a * b).sum();
            for (k, (&w, &dk)) in qi.iter().zip(di).enumerate() {
                let c = 2.0 / t * w * (dk - dbar);
                if c == 0.0 {
                    continue;
                }
                for ((g, p), mv) in gi.iter_mut().zip(bank.prototype(k)).zip(mu) {
                    *g += c * (p - mv);
                }
            }
        }
        gi.iter_mut().for_each(|v| *v *= scale);
    });
    g
}

/// Gradient of the mean loss `L_q` with respect to every embedding `z_n`.
pub fn grad_embeddings(
    z: &Matrix,
    bank: &PrototypeBank,
    t: f64,
    stop_gradient_on_q: bool,
) -> Result<Matrix> {
    let backend = Backend::default();
    let (d, q) = distances_and_assignments(backend, z, bank, t)?;
    let mu = soft_centroids(&q, bank)?;
    Ok(grad_embeddings_from(backend, z, bank, &d, &q, &mu, t, stop_gradient_on_q))
}

/// Per-token upstream signal `2(z_n − μ_n)`: the gradient of the summed loss
/// with respect to `z_n` when `Q` is held fixed.
pub fn grad_encoder_signal(z: &Matrix, centroids: &Matrix) -> Result<Matrix> {
    Ok(z.sub(centroids)?.scale(2.0))
}

/// Repulsion weight and singularity guard of the free energy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeEnergyParams {
    pub lambda: f64,
    pub min_pair_dist_guard: f64,
}

impl Default for FreeEnergyParams {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            min_pair_dist_guard: 1e-6,
        }
    }
}

impl FreeEnergyParams {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(DdclError::invalid("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.min_pair_dist_guard > 0.0) {
            return Err(DdclError::invalid(
                "min_pair_dist_guard",
                format!("must be > 0, got {}", self.min_pair_dist_guard),
            ));
        }
        Ok(())
    }
}

/// `(λ/2) Σ_{j≠k} ‖p_j − p_k‖⁻²` over ordered pairs, and its gradient
/// `−2λ Σ_{k≠j} (p_j − p_k)/‖p_j − p_k‖⁴`.
pub fn repulsion(bank: &PrototypeBank, params: &FreeEnergyParams) -> Result<(f64, Matrix)> {
    params.validate()?;
    let (k, m) = (bank.k(), bank.dim());
    let mut grad = Matrix::zeros(k, m);
    if params.lambda == 0.0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    for j in 0..k {
        for l in (j + 1)..k {
            let r2 = sq_dist(bank.prototype(j), bank.prototype(l));
            if r2.sqrt() < params.min_pair_dist_guard {
                return Err(DdclError::RepulsionSingularity {
                    j,
                    k: l,
                    distance: r2.sqrt(),
                    guard: params.min_pair_dist_guard,
                });
            }
            // each unordered pair appears twice in the ordered sum
            value += params.lambda / r2;
            let c = -2.0 * params.lambda / (r2 * r2);
            for c_idx in 0..m {
                let diff = bank.prototype(j)[c_idx] - bank.prototype(l)[c_idx];
                grad[(j, c_idx)] += c * diff;
                grad[(l, c_idx)] -= c * diff;
            }
        }
    }
    Ok((value, grad))
}

/// Free energy `W = L_q + (λ/2) Σ_{j≠k} ‖p_j − p_k‖⁻²`.
pub fn free_energy(
    z: &Matrix,
    bank: &PrototypeBank,
    t: f64,
    params: &FreeEnergyParams,
) -> Result<f64> {
    let (rep, _) = repulsion(bank, params)?;
    Ok(competitive_loss(z, bank, t)? + rep)
}

/// `∇_P W`: full gradient of `L_q` plus the repulsion gradient.
pub fn grad_free_energy_p(
    z: &Matrix,
    bank: &PrototypeBank,
    t: f64,
    params: &FreeEnergyParams,
) -> Result<Matrix> {
    let (_, rep) = repulsion(bank, params)?;
    grad_prototypes(z, bank, t, false)?.add(&rep)
}

/// `∂L_q/∂T = (1/(N T²)) Σ_n Var_{q_n}[d_n] ≥ 0`.
pub fn d_lq_d_t(z: &Matrix, bank: &PrototypeBank, t: f64) -> Result<f64> {
    let backend = Backend::default();
    let (d, q) = distances_and_assignments(backend, z, bank, t)?;
    let n = z.rows();
    let vars = exec::map_indices(backend, n, |i| {
        let (qi, di) = (q.row(i), d.row(i));
        let mean: f64 = qi.iter().zip(di).map(|(a, b)| a * b).sum();
        let second: f64 = qi.iter().zip(di).map(|(a, b)| a * b * b).sum();
        // E[(d - mean)^2] form keeps the result nonnegative
        let centered: f64 = qi.iter().zip(di).map(|(a, b)| a * (b - mean) * (b - mean)).sum();
        debug_assert!((centered - (second - mean * mean)).abs() <= 1e-6 * second.max(1.0));
        centered
    });
    Ok(vars.iter().sum::<f64>() / (n.max(1) as f64 * t * t))
}

/// Regularity condition `λ > 2 η_P C(K, 2)` for the frozen-encoder
/// Lyapunov result.
pub fn check_regularity(lambda: f64, eta_p: f64, k: usize) -> bool {
    let pairs = (k * k.saturating_sub(1)) as f64 / 2.0;
    lambda > 2.0 * eta_p * pairs
}
