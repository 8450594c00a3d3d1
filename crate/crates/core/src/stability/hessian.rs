use crate::error::{DdclError, Result};
use crate::layer::PrototypeBank;
use crate::loss::{competitive_loss, repulsion};
use crate::numerics::Matrix;
use crate::trainer::{objective_gradients, Encoder, TrainerConfig, TrainerState};

/// How the per-token loss is aggregated in the stability objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// `Σ_n`, so a single prototype gives `H_PP = 2N·I`.
    #[default]
    Sum,
    /// `(1/N) Σ_n`, the trainer's convention.
    Mean,
}

/// Objective `L_q(θ, P) + repulsion(P)` at fixed data and temperature, with
/// parameters flattened as `[vec(W) | vec(P)]` (row-major). Without an
/// encoder matrix the embeddings are the data and `n_θ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSystem {
    pub x: Matrix,
    pub w: Option<Matrix>,
    pub bank: PrototypeBank,
    pub t: f64,
    pub lambda: f64,
    pub reduction: Reduction,
}

impl ParamSystem {
    pub fn n_theta(&self) -> usize {
        self.w.as_ref().map_or(0, |w| w.rows() * w.cols())
    }

    pub fn n_p(&self) -> usize {
        self.bank.k() * self.bank.dim()
    }

    pub fn n_params(&self) -> usize {
        self.n_theta() + self.n_p()
    }

    pub fn point(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        if let Some(w) = &self.w {
            v.extend_from_slice(w.as_slice());
        }
        v.extend_from_slice(self.bank.matrix().as_slice());
        v
    }

    pub fn with_point(&self, point: &[f64]) -> Result<ParamSystem> {
        if point.len() != self.n_params() {
            return Err(DdclError::DimensionMismatch {
                context: "ParamSystem point",
                expected: self.n_params(),
                got: point.len(),
            });
        }
        let nt = self.n_theta();
        let w = self
            .w
            .as_ref()
            .map(|w| Matrix::new(w.rows(), w.cols(), point[..nt].to_vec()))
            .transpose()?;
        let bank = PrototypeBank::new(Matrix::new(self.bank.k(), self.bank.dim(), point[nt..].to_vec())?)?;
        Ok(ParamSystem { w, bank, ..self.clone() })
    }

    fn embeddings(&self) -> Result<Matrix> {
        match &self.w {
            Some(w) => self.x.matmul_transpose(w),
            None => Ok(self.x.clone()),
        }
    }

    fn scale(&self) -> f64 {
        match self.reduction {
            Reduction::Sum => self.x.rows() as f64,
            Reduction::Mean => 1.0,
        }
    }

    fn trainer_view(&self) -> (TrainerState, TrainerConfig) {
        let encoder = match &self.w {
            Some(w) => Encoder::Linear(w.clone()),
            None => Encoder::Identity,
        };
        let config = TrainerConfig { lambda: self.lambda, sg_on_q: false, ..TrainerConfig::default() };
        (TrainerState::new(encoder, self.bank.clone()), config)
    }

    pub fn objective(&self) -> Result<f64> {
        let (_, config) = self.trainer_view();
        let (rep, _) = repulsion(&self.bank, &config.free_energy_params())?;
        Ok(self.scale() * competitive_loss(&self.embeddings()?, &self.bank, self.t)? + rep)
    }

    pub fn objective_at(&self, point: &[f64]) -> Result<f64> {
        self.with_point(point)?.objective()
    }

    /// Analytic gradient in the flattened layout.
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let (state, config) = self.trainer_view();
        let g = objective_gradients(&state, &self.x, self.t, &config)?;
        let s = self.scale();
        let (_, g_rep) = repulsion(&self.bank, &config.free_energy_params())?;
        let mut out = Vec::with_capacity(self.n_params());
        if let Some(g_w) = g.encoder {
            out.extend(g_w.as_slice().iter().map(|v| s * v));
        }
        // objective_gradients already added the repulsion gradient once;
        // only the L_q part is rescaled
        for (gp, gr) in g.prototypes.as_slice().iter().zip(g_rep.as_slice()) {
            out.push(s * (gp - gr) + gr);
        }
        Ok(out)
    }

    pub fn gradient_at(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.with_point(point)?.gradient()
    }

    pub fn gradient_norm(&self) -> Result<f64> {
        Ok(self.gradient()?.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// Blocks of the symmetric Hessian in the `[θ | P]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlocks {
    pub h_tt: Matrix,
    pub h_tp: Matrix,
    pub h_pp: Matrix,
    /// Largest `|H_ij − H_ji|` before symmetrisation.
    pub asymmetry: f64,
}

impl HessianBlocks {
    pub fn from_full(h: &Matrix, n_theta: usize) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n || n_theta > n {
            return Err(DdclError::DimensionMismatch { context: "HessianBlocks", expected: n, got: h.cols() });
        }
        let mut asymmetry: f64 = 0.0;
        let mut sym = h.clone();
        for i in 0..n {
            for j in 0..i {
                asymmetry = asymmetry.max((h[(i, j)] - h[(j, i)]).abs());
                let v = 0.5 * (h[(i, j)] + h[(j, i)]);
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        let np = n - n_theta;
        let block = |r0: usize, c0: usize, r: usize, c: usize| {
            let mut m = Matrix::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    m[(i, j)] = sym[(r0 + i, c0 + j)];
                }
            }
            m
        };
        Ok(Self {
            h_tt: block(0, 0, n_theta, n_theta),
            h_tp: block(0, n_theta, n_theta, np),
            h_pp: block(n_theta, n_theta, np, np),
            asymmetry,
        })
    }

    pub fn n_theta(&self) -> usize {
        self.h_tt.rows()
    }

    pub fn n_p(&self) -> usize {
        self.h_pp.rows()
    }

    pub fn full(&self) -> Matrix {
        let (nt, np) = (self.n_theta(), self.n_p());
        let mut h = Matrix::zeros(nt + np, nt + np);
        for i in 0..nt {
            for j in 0..nt {
                h[(i, j)] = self.h_tt[(i, j)];
            }
            for j in 0..np {
                h[(i, nt + j)] = self.h_tp[(i, j)];
                h[(nt + j, i)] = self.h_tp[(i, j)];
            }
        }
        for i in 0..np {
            for j in 0..np {
                h[(nt + i, nt + j)] = self.h_pp[(i, j)];
            }
        }
        h
    }
}

fn step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Central second differences of the objective with step `1e-4·max(1, |x_i|)`,
/// symmetrised.
pub fn estimate_hessian_blocks(system: &ParamSystem) -> Result<HessianBlocks> {
    let x0 = system.point();
    let n = x0.len();
    let f0 = system.objective()?;
    let mut h = Matrix::zeros(n, n);
    let eval = |deltas: &[(usize, f64)]| -> Result<f64> {
        let mut x = x0.clone();
        for &(i, d) in deltas {
            x[i] += d;
        }
        system.objective_at(&x)
    };
    for i in 0..n {
        let hi = step(x0[i]);
        let fp = eval(&[(i, hi)])?;
        let fm = eval(&[(i, -hi)])?;
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = step(x0[j]);
            let fpp = eval(&[(i, hi), (j, hj)])?;
            let fpm = eval(&[(i, hi), (j, -hj)])?;
            let fmp = eval(&[(i, -hi), (j, hj)])?;
            let fmm = eval(&[(i, -hi), (j, -hj)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    if !h.is_finite() {
        return Err(DdclError::NonFinite("Hessian estimate"));
    }
    HessianBlocks::from_full(&h, system.n_theta())
}

/// Central differences of the analytic gradient, symmetrised.
pub fn estimate_hessian_from_gradient(system: &ParamSystem) -> Result<HessianBlocks> {
    let x0 = system.point();
    let n = x0.len();
    let mut h = Matrix::zeros(n, n);
    for j in 0..n {
        let hj = step(x0[j]);
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += hj;
        xm[j] -= hj;
        let gp = system.gradient_at(&xp)?;
        let gm = system.gradient_at(&xm)?;
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * hj);
        }
    }
    if !h.is_finite() {
        return Err(DdclError::NonFinite("Hessian estimate"));
    }
    HessianBlocks::from_full(&h, system.n_theta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use approx::assert_relative_eq;

    fn random_system(rng: &mut SeededRng, with_w: bool, reduction: Reduction) -> ParamSystem {
        let x = Matrix::new(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let w = with_w.then(|| Matrix::new(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap());
        let m = if with_w { 2 } else { 3 };
        let bank = PrototypeBank::new(Matrix::new(3, m, (0..3 * m).map(|_| rng.normal()).collect()).unwrap()).unwrap();
        ParamSystem { x, w, bank, t: 0.9, lambda: 0.05, reduction }
    }

    #[test]
    fn single_prototype_is_a_quadratic_bowl() {
        let mut rng = SeededRng::new(2);
        let x = Matrix::new(5, 2, (0..10).map(|_| rng.normal()).collect()).unwrap();
        let bank = PrototypeBank::from_rows(&[[0.3, -0.2]]).unwrap();
        let sys = ParamSystem { x, w: None, bank, t: 1.0, lambda: 0.0, reduction: Reduction::Sum };
        let h = estimate_hessian_blocks(&sys).unwrap();
        assert_eq!(h.n_theta(), 0);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 10.0 } else { 0.0 };
                assert_relative_eq!(h.h_pp[(i, j)], want, epsilon = 1e-4);
            }
        }
    }

    /// `f(p1, p2) = Σ_n Σ_k q_nk (z_n − p_k)²` in 1D with four symmetric
    /// points; second derivatives from the closed-form softmax calculus.
    #[test]
    fn scalar_toy_matches_symbolic_second_derivative() {
        let zs = [-2.0, -1.0, 1.0, 2.0];
        let (p1, p2, t) = (-1.2, 1.3, 0.7);
        let x = Matrix::from_rows(&zs.iter().map(|&z| [z]).collect::<Vec<_>>()).unwrap();
        let bank = PrototypeBank::from_rows(&[[p1], [p2]]).unwrap();
        let sys = ParamSystem { x, w: None, bank, t, lambda: 0.0, reduction: Reduction::Sum };
        let h = estimate_hessian_blocks(&sys).unwrap();

        // per token: d_k = (z-p_k)^2, q1 = σ((d2-d1)/T), f = q1 d1 + q2 d2
        // ∂d_k/∂p_k = -2(z-p_k) =: a_k, ∂²d_k/∂p_k² = 2
        // ∂q1/∂p1 = -q1 q2 a1/T, ∂q1/∂p2 = q1 q2 a2/T
        // ∂f/∂p_k = q_k a_k (1 - (d_k - d̄)/T) with d̄ = q1 d1 + q2 d2
        let mut oracle = [[0.0; 2]; 2];
        for &z in &zs {
            let d = [(z - p1) * (z - p1), (z - p2) * (z - p2)];
            let a = [-2.0 * (z - p1), -2.0 * (z - p2)];
            let q1 = 1.0 / (1.0 + ((d[0] - d[1]) / t).exp());
            let q = [q1, 1.0 - q1];
            let s = q[0] * q[1];
            // dq_k/dp_j
            let dq = |k: usize, j: usize| {
                let sign = if k == j { -1.0 } else { 1.0 };
                sign * s * a[j] / t
            };
            let dbar = q[0] * d[0] + q[1] * d[1];
            let ddbar = |j: usize| q[j] * a[j] + (dq(0, j) * d[0] + dq(1, j) * d[1]);
            for k in 0..2 {
                for j in 0..2 {
                    let g = 1.0 - (d[k] - dbar) / t;
                    let dd_k = if k == j { a[k] } else { 0.0 };
                    let da_k = if k == j { 2.0 } else { 0.0 };
                    let dg = -(dd_k - ddbar(j)) / t;
                    oracle[k][j] += dq(k, j) * a[k] * g + q[k] * da_k * g + q[k] * a[k] * dg;
                }
            }
        }
        for k in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(h.h_pp[(k, j)], oracle[k][j], epsilon = 1e-4, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_objective() {
        let mut rng = SeededRng::new(8);
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let sys = random_system(&mut rng, true, reduction);
            let g = sys.gradient().unwrap();
            let x0 = sys.point();
            for i in 0..x0.len() {
                let h = 1e-6;
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (sys.objective_at(&xp).unwrap() - sys.objective_at(&xm).unwrap()) / (2.0 * h);
                assert_relative_eq!(g[i], fd, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn two_estimators_agree() {
        let mut rng = SeededRng::new(9);
        let sys = random_system(&mut rng, true, Reduction::Sum);
        let a = estimate_hessian_blocks(&sys).unwrap().full();
        let b = estimate_hessian_from_gradient(&sys).unwrap().full();
        let scale = b.max_abs().max(1.0);
        assert!(a.sub(&b).unwrap().max_abs() / scale < 1e-3);
        assert!(estimate_hessian_from_gradient(&sys).unwrap().asymmetry < 1e-4 * scale);
    }
}
