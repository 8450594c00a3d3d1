//! The prototype readout layer: Boltzmann assignments over a global
//! prototype bank, soft centroids, and the residual/LayerNorm output.

use crate::error::{DdclError, Result};
use crate::exec::{self, Backend};
use crate::numerics::{layer_norm, pairwise_sq_dists_with, softmax_in_place, Matrix, SeededRng};

/// `K` prototypes in `R^m`, stored as the rows of a `K × m` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    p: Matrix,
}

impl PrototypeBank {
    pub fn new(p: Matrix) -> Result<Self> {
        if p.rows() == 0 {
            return Err(DdclError::invalid("K", "prototype bank needs at least one prototype"));
        }
        if p.cols() == 0 {
            return Err(DdclError::invalid("m", "prototype dimension must be positive"));
        }
        if !p.is_finite() {
            return Err(DdclError::NonFinite("PrototypeBank"));
        }
        Ok(Self { p })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn k(&self) -> usize {
        self.p.rows()
    }

    pub fn dim(&self) -> usize {
        self.p.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        self.p.row(k)
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.p
    }

    pub fn into_matrix(self) -> Matrix {
        self.p
    }
}

/// Row-stochastic `N × K` soft assignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    q: Matrix,
}

impl AssignmentMatrix {
    /// Wrap `q`, checking that rows are nonnegative and sum to one.
    pub fn new(q: Matrix) -> Result<Self> {
        for (n, row) in q.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(DdclError::invalid(
                    "Q",
                    format!("row {n} is not a probability vector (sum {sum})"),
                ));
            }
        }
        Ok(Self { q })
    }

    pub(crate) fn from_softmax(q: Matrix) -> Self {
        Self { q }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn k(&self) -> usize {
        self.q.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.q.row(n)
    }

    /// Index of the most probable prototype per token (ties → lowest index).
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.q
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean assignment mass per prototype.
    pub fn column_means(&self) -> Vec<f64> {
        self.q.column_means()
    }

    pub fn min_entry(&self) -> f64 {
        self.q.as_slice().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(DdclError::invalid("T", format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Squared distances and Boltzmann assignments in one pass.
pub(crate) fn distances_and_assignments(
    backend: Backend,
    z: &Matrix,
    bank: &PrototypeBank,
    t: f64,
) -> Result<(Matrix, AssignmentMatrix)> {
    check_temperature(t)?;
    let d = pairwise_sq_dists_with(backend, z, bank.matrix())?;
    let k = bank.k();
    let mut q = d.clone();
    exec::fill_rows(backend, q.as_mut_slice(), k, |_, row| {
        for v in row.iter_mut() {
            *v = -*v / t;
        }
        softmax_in_place(row);
    });
    Ok((d, AssignmentMatrix::from_softmax(q)))
}

/// `q_nk = softmax_k(−‖z_n − p_k‖² / T)`.
pub fn assign(z: &Matrix, bank: &PrototypeBank, t: f64) -> Result<AssignmentMatrix> {
    assign_with(Backend::default(), z, bank, t)
}

pub fn assign_with(
    backend: Backend,
    z: &Matrix,
    bank: &PrototypeBank,
    t: f64,
) -> Result<AssignmentMatrix> {
    distances_and_assignments(backend, z, bank, t).map(|(_, q)| q)
}

/// `μ_n = Σ_k q_nk p_k`.
pub fn soft_centroids(q: &AssignmentMatrix, bank: &PrototypeBank) -> Result<Matrix> {
    if q.k() != bank.k() {
        return Err(DdclError::DimensionMismatch {
            context: "soft_centroids",
            expected: bank.k(),
            got: q.k(),
        });
    }
    q.matrix().matmul(bank.matrix())
}

/// Output projection and LayerNorm parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `m × m` output projection `W_O`.
    pub w_o: Matrix,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub ln_eps: f64,
}

impl LayerParams {
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// `W_O = I`, unit gain, zero bias.
    pub fn identity(m: usize) -> Self {
        Self {
            w_o: Matrix::identity(m),
            ln_gain: vec![1.0; m],
            ln_bias: vec![0.0; m],
            ln_eps: Self::DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_o.rows()
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.w_o.shape() != (m, m) {
            return Err(DdclError::DimensionMismatch {
                context: "LayerParams::w_o",
                expected: m * m,
                got: self.w_o.rows() * self.w_o.cols(),
            });
        }
        if self.ln_gain.len() != m || self.ln_bias.len() != m {
            return Err(DdclError::DimensionMismatch {
                context: "LayerParams layer norm",
                expected: m,
                got: self.ln_gain.len().min(self.ln_bias.len()),
            });
        }
        Ok(())
    }

    /// `h = LayerNorm(z + W_O o)` applied row-wise.
    fn residual(&self, backend: Backend, z: &Matrix, o: &Matrix) -> Result<Matrix> {
        let m = z.cols();
        let rows = exec::map_indices(backend, z.rows(), |n| {
            let projected = self.w_o.mul_vec(o.row(n))?;
            let pre: Vec<f64> = z.row(n).iter().zip(&projected).map(|(a, b)| a + b).collect();
            layer_norm(&pre, &self.ln_gain, &self.ln_bias, self.ln_eps)
        });
        let mut data = Vec::with_capacity(z.rows() * m);
        for r in rows {
            data.extend(r?);
        }
        Matrix::new(z.rows(), m, data)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Layer output `h_n`, `N × m`.
    pub h: Matrix,
    pub q: AssignmentMatrix,
    /// Soft centroids `μ_n` (the pre-projection layer output), `N × m`.
    pub centroids: Matrix,
}

pub fn forward(
    z: &Matrix,
    bank: &PrototypeBank,
    params: &LayerParams,
    t: f64,
) -> Result<ForwardOutput> {
    forward_with(Backend::default(), z, bank, params, t)
}

pub fn forward_with(
    backend: Backend,
    z: &Matrix,
    bank: &PrototypeBank,
    params: &LayerParams,
    t: f64,
) -> Result<ForwardOutput> {
    params.validate(z.cols())?;
    let q = assign_with(backend, z, bank, t)?;
    let centroids = soft_centroids(&q, bank)?;
    let h = params.residual(backend, z, &centroids)?;
    Ok(ForwardOutput { h, q, centroids })
}

/// One head: an `m_h × m` input projection and a `K × m_h` bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub projection: Matrix,
    pub bank: PrototypeBank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadBank {
    heads: Vec<Head>,
    m: usize,
}

impl MultiHeadBank {
    pub fn new(heads: Vec<Head>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| DdclError::invalid("H", "need at least one head"))?;
        let m = first.projection.cols();
        let m_h = first.projection.rows();
        for h in &heads {
            if h.projection.shape() != (m_h, m) || h.bank.dim() != m_h {
                return Err(DdclError::DimensionMismatch {
                    context: "MultiHeadBank head shapes",
                    expected: m_h,
                    got: h.bank.dim(),
                });
            }
        }
        if m_h * heads.len() != m {
            return Err(DdclError::invalid(
                "H",
                format!("H·m_h = {} must equal m = {m}", m_h * heads.len()),
            ));
        }
        Ok(Self { heads, m })
    }

    /// Random heads: projection entries uniform in `±1/√m`, prototypes
    /// standard normal.
    pub fn random(h: usize, k: usize, m: usize, rng: &mut SeededRng) -> Result<Self> {
        if h == 0 || !m.is_multiple_of(h) {
            return Err(DdclError::invalid(
                "H",
                format!("m = {m} is not divisible by H = {h}"),
            ));
        }
        let m_h = m / h;
        let bound = 1.0 / (m as f64).sqrt();
        let heads = (0..h)
            .map(|_| {
                let proj = (0..m_h * m).map(|_| rng.uniform(-bound, bound)).collect();
                let protos = (0..k * m_h).map(|_| rng.normal()).collect();
                Ok(Head {
                    projection: Matrix::new(m_h, m, proj)?,
                    bank: PrototypeBank::new(Matrix::new(k, m_h, protos)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(heads)
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.m / self.heads.len()
    }

    pub fn dim(&self) -> usize {
        self.m
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    pub h: Matrix,
    /// Per-head assignments, in head order.
    pub q: Vec<AssignmentMatrix>,
    /// Per-head projected inputs `z^(h)`.
    pub head_inputs: Vec<Matrix>,
    /// Concatenated per-head centroids, `N × m`.
    pub centroids: Matrix,
}

pub fn multi_head_forward(
    z: &Matrix,
    mh: &MultiHeadBank,
    params: &LayerParams,
    t: f64,
) -> Result<MultiHeadOutput> {
    let backend = Backend::default();
    if z.cols() != mh.dim() {
        return Err(DdclError::DimensionMismatch {
            context: "multi_head_forward",
            expected: mh.dim(),
            got: z.cols(),
        });
    }
    params.validate(z.cols())?;
    let m_h = mh.head_dim();
    let mut concat = Matrix::zeros(z.rows(), mh.dim());
    let mut qs = Vec::with_capacity(mh.heads.len());
    let mut inputs = Vec::with_capacity(mh.heads.len());
    for (hi, head) in mh.heads.iter().enumerate() {
        let zh = z.matmul_transpose(&head.projection)?;
        let q = assign_with(backend, &zh, &head.bank, t)?;
        let o = soft_centroids(&q, &head.bank)?;
        for n in 0..z.rows() {
            concat.row_mut(n)[hi * m_h..(hi + 1) * m_h].copy_from_slice(o.row(n));
        }
        qs.push(q);
        inputs.push(zh);
    }
    let h = params.residual(backend, z, &concat)?;
    Ok(MultiHeadOutput {
        h,
        q: qs,
        head_inputs: inputs,
        centroids: concat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bank_1d(values: &[f64]) -> PrototypeBank {
        let rows: Vec<[f64; 1]> = values.iter().map(|&v| [v]).collect();
        PrototypeBank::from_rows(&rows).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn assign_examples() {
        let z = Matrix::from_rows(&[[0.3, -2.0]]).unwrap();
        let q = assign(&z, &PrototypeBank::from_rows(&[[1.0, 1.0]]).unwrap(), 0.7).unwrap();
        assert_eq!(q.matrix().as_slice(), &[1.0]);

        let z = Matrix::from_rows(&[[0.0]]).unwrap();
        for t in [0.01, 1.0, 100.0] {
            let q = assign(&z, &bank_1d(&[-1.0, 1.0]), t).unwrap();
            assert_eq!(q.row(0), &[0.5, 0.5]);
        }

        let q = assign(&z, &bank_1d(&[1.0, 2.0]), 1.0).unwrap();
        let e1 = (-1.0f64).exp();
        let e4 = (-4.0f64).exp();
        assert_relative_eq!(q.row(0)[0], e1 / (e1 + e4), epsilon = 1e-15);
        assert_relative_eq!(q.row(0)[0], 0.95257, epsilon = 1e-5);
    }

    #[test]
    fn assign_rejects_nonpositive_temperature() {
        let z = Matrix::zeros(1, 1);
        assert!(assign(&z, &bank_1d(&[0.0]), 0.0).is_err());
        assert!(assign(&z, &bank_1d(&[0.0]), -1.0).is_err());
    }

    #[test]
    fn centroid_examples() {
        let bank = PrototypeBank::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let q = AssignmentMatrix::new(Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(soft_centroids(&q, &bank).unwrap().row(0), &[1.0, 2.0]);

        let q = AssignmentMatrix::new(Matrix::from_rows(&[[0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(soft_centroids(&q, &bank_1d(&[-1.0, 1.0])).unwrap().row(0), &[0.0]);

        let q = AssignmentMatrix::new(Matrix::from_rows(&[[0.25, 0.75]]).unwrap()).unwrap();
        assert_eq!(soft_centroids(&q, &bank_1d(&[0.0, 4.0])).unwrap().row(0), &[3.0]);
    }

    #[test]
    fn assignment_matrix_validation() {
        assert!(AssignmentMatrix::new(Matrix::from_rows(&[[0.6, 0.6]]).unwrap()).is_err());
        assert!(AssignmentMatrix::new(Matrix::from_rows(&[[1.5, -0.5]]).unwrap()).is_err());
    }

    #[test]
    fn forward_with_zero_projection_is_residual_only() {
        let mut rng = SeededRng::new(3);
        let z = random_matrix(4, 3, &mut rng);
        let bank = PrototypeBank::new(random_matrix(2, 3, &mut rng)).unwrap();
        let mut params = LayerParams::identity(3);
        params.w_o = Matrix::zeros(3, 3);
        let out = forward(&z, &bank, &params, 0.5).unwrap();
        for n in 0..4 {
            let want = layer_norm(z.row(n), &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
            assert_eq!(out.h.row(n), want.as_slice());
        }
    }

    #[test]
    fn forward_single_prototype_at_token_doubles_input() {
        let z = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let bank = PrototypeBank::new(z.clone()).unwrap();
        let params = LayerParams::identity(3);
        let out = forward(&z, &bank, &params, 1.0).unwrap();
        let want = layer_norm(&[2.0, -4.0, 1.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(out.h.row(0), want.as_slice());
    }

    /// Step-by-step re-evaluation with plain loops.
    #[test]
    fn forward_matches_scripted_oracle() {
        let mut rng = SeededRng::new(11);
        let z = random_matrix(3, 4, &mut rng);
        let bank = PrototypeBank::new(random_matrix(2, 4, &mut rng)).unwrap();
        let mut params = LayerParams::identity(4);
        params.w_o = random_matrix(4, 4, &mut rng);
        params.ln_gain = vec![1.5, 0.5, 1.0, 2.0];
        params.ln_bias = vec![0.1, -0.2, 0.0, 0.3];
        let t = 0.8;
        let out = forward(&z, &bank, &params, t).unwrap();

        for n in 0..3 {
            let mut w = [0.0; 2];
            for k in 0..2 {
                let mut d = 0.0;
                for j in 0..4 {
                    d += (z[(n, j)] - bank.matrix()[(k, j)]).powi(2);
                }
                w[k] = (-d / t).exp();
            }
            let s = w[0] + w[1];
            let q = [w[0] / s, w[1] / s];
            let mut mu = [0.0; 4];
            for j in 0..4 {
                mu[j] = q[0] * bank.matrix()[(0, j)] + q[1] * bank.matrix()[(1, j)];
            }
            let mut pre = [0.0; 4];
            for i in 0..4 {
                pre[i] = z[(n, i)];
                for j in 0..4 {
                    pre[i] += params.w_o[(i, j)] * mu[j];
                }
            }
            let mean = pre.iter().sum::<f64>() / 4.0;
            let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for i in 0..4 {
                let want = params.ln_gain[i] * (pre[i] - mean) / (var + 1e-5).sqrt() + params.ln_bias[i];
                assert_relative_eq!(out.h[(n, i)], want, epsilon = 1e-12);
            }
            assert_relative_eq!(out.q.row(n)[0], q[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn single_head_identity_reduces_to_forward() {
        let mut rng = SeededRng::new(5);
        let z = random_matrix(6, 4, &mut rng);
        let bank = PrototypeBank::new(random_matrix(3, 4, &mut rng)).unwrap();
        let mh = MultiHeadBank::new(vec![Head {
            projection: Matrix::identity(4),
            bank: bank.clone(),
        }])
        .unwrap();
        let params = LayerParams::identity(4);
        let a = forward(&z, &bank, &params, 0.9).unwrap();
        let b = multi_head_forward(&z, &mh, &params, 0.9).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.q, b.q[0]);
    }

    #[test]
    fn coordinate_split_heads_match_slices() {
        let mut rng = SeededRng::new(8);
        let z = random_matrix(5, 4, &mut rng);
        let mut heads = Vec::new();
        let mut banks = Vec::new();
        for h in 0..2 {
            let mut proj = Matrix::zeros(2, 4);
            proj[(0, 2 * h)] = 1.0;
            proj[(1, 2 * h + 1)] = 1.0;
            let bank = PrototypeBank::new(random_matrix(3, 2, &mut rng)).unwrap();
            banks.push(bank.clone());
            heads.push(Head { projection: proj, bank });
        }
        let mh = MultiHeadBank::new(heads).unwrap();
        let out = multi_head_forward(&z, &mh, &LayerParams::identity(4), 0.6).unwrap();
        for h in 0..2 {
            let slice = Matrix::from_rows(
                &(0..5).map(|n| z.row(n)[2 * h..2 * h + 2].to_vec()).collect::<Vec<_>>(),
            )
            .unwrap();
            let q = assign(&slice, &banks[h], 0.6).unwrap();
            assert_eq!(q, out.q[h]);
        }
    }

    /// Oracle recomputes per-head projection, assignments, concatenation,
    /// output projection and LayerNorm with nested loops.
    #[test]
    fn multi_head_matches_scripted_oracle() {
        let mut rng = SeededRng::new(21);
        let (n, m, h, k, t) = (4, 6, 2, 3, 0.7);
        let mh = MultiHeadBank::random(h, k, m, &mut rng).unwrap();
        let z = random_matrix(n, m, &mut rng);
        let mut params = LayerParams::identity(m);
        params.w_o = random_matrix(m, m, &mut rng);
        let out = multi_head_forward(&z, &mh, &params, t).unwrap();
        let m_h = m / h;
        for i in 0..n {
            let mut cat = vec![0.0; m];
            for (hi, head) in mh.heads().iter().enumerate() {
                let zh: Vec<f64> = (0..m_h)
                    .map(|r| (0..m).map(|c| head.projection[(r, c)] * z[(i, c)]).sum())
                    .collect();
                let logits: Vec<f64> = (0..k)
                    .map(|kk| {
                        -(0..m_h)
                            .map(|c| (zh[c] - head.bank.matrix()[(kk, c)]).powi(2))
                            .sum::<f64>()
                            / t
                    })
                    .collect();
                let mx = logits.iter().copied().fold(f64::MIN, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let s: f64 = w.iter().sum();
                for c in 0..m_h {
                    cat[hi * m_h + c] =
                        (0..k).map(|kk| w[kk] / s * head.bank.matrix()[(kk, c)]).sum();
                }
            }
            let pre: Vec<f64> = (0..m)
                .map(|r| z[(i, r)] + (0..m).map(|c| params.w_o[(r, c)] * cat[c]).sum::<f64>())
                .collect();
            let mean = pre.iter().sum::<f64>() / m as f64;
            let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            for r in 0..m {
                assert_relative_eq!(out.h[(i, r)], (pre[r] - mean) / (var + 1e-5).sqrt(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_rejects_indivisible_dimension() {
        let mut rng = SeededRng::new(1);
        assert!(MultiHeadBank::random(3, 2, 4, &mut rng).is_err());
    }
}
