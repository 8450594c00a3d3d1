//! Soft codebook (prototype layer) versus hard nearest-code quantisation, and
//! codebook utilisation.

use crate::data::{TokenStream, TokenStreamParams};
use crate::error::{DdclError, Result};
use crate::layer::{assign, soft_centroids, AssignmentMatrix, PrototypeBank};
use crate::numerics::{sq_dist, Matrix, SeededRng};
use crate::trainer::{objective_gradients, train_epoch, AnnealSchedule, EpochLog, Encoder, TrainerConfig, TrainerState};

pub type Codebook = PrototypeBank;

/// Soft quantisation: the prototype layer's assignments and centroids.
pub fn soft_quantize(tokens: &Matrix, codebook: &Codebook, t: f64) -> Result<(Matrix, AssignmentMatrix)> {
    let q = assign(tokens, codebook, t)?;
    Ok((soft_centroids(&q, codebook)?, q))
}

/// Batch-mean losses of one hard step. Codebook and commitment terms share
/// the value `mean ‖z − e_k*‖²`; they differ only in which side is frozen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardLosses {
    pub codebook: f64,
    pub commitment: f64,
    /// `codebook + β·commitment`.
    pub total: f64,
}

/// Nearest-code index per token, lowest index on ties.
pub fn nearest_codes(tokens: &Matrix, codebook: &Codebook) -> Result<Vec<usize>> {
    if tokens.cols() != codebook.dim() {
        return Err(DdclError::DimensionMismatch {
            context: "nearest_codes",
            expected: codebook.dim(),
            got: tokens.cols(),
        });
    }
    Ok(tokens
        .row_iter()
        .map(|z| {
            let mut best = (0, f64::INFINITY);
            for k in 0..codebook.k() {
                let d = sq_dist(z, codebook.prototype(k));
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// One codebook-side update of hard VQ:
/// `e_k ← e_k − η·(2/N)·Σ_{n: k*(n)=k} (e_k − z_n)`.
/// Codes that win no token are returned untouched.
pub fn hard_quantize_step(
    tokens: &Matrix,
    codebook: &Codebook,
    beta: f64,
    eta: f64,
) -> Result<(Vec<usize>, Codebook, HardLosses)> {
    if !(beta >= 0.0) {
        return Err(DdclError::invalid("beta", format!("must be >= 0, got {beta}")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(DdclError::invalid("eta", format!("must be finite and >= 0, got {eta}")));
    }
    let n = tokens.rows();
    if n == 0 {
        return Err(DdclError::EmptyInput("hard_quantize_step"));
    }
    let idx = nearest_codes(tokens, codebook)?;
    let (k, m) = (codebook.k(), codebook.dim());
    let mut grad = Matrix::zeros(k, m);
    let mut hit = vec![false; k];
    let mut err = 0.0;
    for (z, &c) in tokens.row_iter().zip(&idx) {
        hit[c] = true;
        let e = codebook.prototype(c);
        err += sq_dist(z, e);
        for ((g, ev), zv) in grad.row_mut(c).iter_mut().zip(e).zip(z) {
            *g += ev - zv;
        }
    }
    let scale = 2.0 * eta / n as f64;
    let mut updated = codebook.matrix().clone();
    for c in (0..k).filter(|&c| hit[c]) {
        for (e, g) in updated.row_mut(c).iter_mut().zip(grad.row(c)) {
            *e -= scale * g;
        }
    }
    let mse = err / n as f64;
    let losses = HardLosses { codebook: mse, commitment: mse, total: mse + beta * mse };
    Ok((idx, PrototypeBank::new(updated)?, losses))
}

/// Mean soft assignment per code.
pub fn soft_usage(q: &AssignmentMatrix) -> Vec<f64> {
    q.column_means()
}

/// Empirical assignment frequency per code.
pub fn hard_usage(indices: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i] += 1;
    }
    let n = indices.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Fraction of codes whose usage exceeds `threshold`.
pub fn utilization(usage: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DdclError::invalid("threshold", format!("must lie in (0, 1), got {threshold}")));
    }
    if usage.is_empty() {
        return Err(DdclError::EmptyInput("utilization"));
    }
    Ok(usage.iter().filter(|&&u| u > threshold).count() as f64 / usage.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationRecord {
    /// 1-based epoch.
    pub epoch: usize,
    pub usage: Vec<f64>,
    pub utilization: f64,
    pub threshold: f64,
}

impl UtilizationRecord {
    fn new(epoch: usize, usage: Vec<f64>, threshold: f64) -> Result<Self> {
        let utilization = utilization(&usage, threshold)?;
        Ok(Self { epoch, usage, utilization, threshold })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqConfig {
    pub k: usize,
    pub tokens: TokenStreamParams,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Soft arm; the encoder is the identity so only prototype settings matter.
    pub soft: TrainerConfig,
    pub hard_eta: f64,
    pub beta: f64,
    /// Both codebooks start from the same draw, uniform in `±init_scale`;
    /// `None` means `±1/K`.
    pub init_scale: Option<f64>,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            k: 64,
            tokens: TokenStreamParams::default(),
            epochs: 20,
            seed: 42,
            threshold: 0.01,
            soft: TrainerConfig {
                eta_p: 0.05,
                eta_theta: 0.0025,
                lambda: 0.5,
                clip: 2.0,
                epochs: 20,
                schedule: AnnealSchedule { t0: 2.0, t_min: 0.3, tau: 20.0 },
                ..TrainerConfig::default()
            },
            hard_eta: 0.5,
            beta: 0.25,
            init_scale: None,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(DdclError::invalid("k", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DdclError::invalid("threshold", "must lie in (0, 1)"));
        }
        if !(self.hard_eta >= 0.0) || !(self.beta >= 0.0) {
            return Err(DdclError::invalid("hard_eta/beta", "must be >= 0"));
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DdclError::invalid("init_scale", "must be finite and > 0"));
            }
        }
        self.soft.validate()
    }

    /// The shared initial codebook.
    pub fn initial_codebook(&self) -> Result<Codebook> {
        let scale = self.init_scale.unwrap_or(1.0 / self.k as f64);
        let mut rng = SeededRng::new(self.seed).split(1);
        let data = (0..self.k * self.tokens.dim).map(|_| rng.uniform(-scale, scale)).collect();
        PrototypeBank::new(Matrix::new(self.k, self.tokens.dim, data)?)
    }
}

/// Per-epoch record of both arms on the same token sample.
#[derive(Clone, Debug, PartialEq)]
pub struct VqEpoch {
    pub soft: UtilizationRecord,
    pub hard: UtilizationRecord,
    pub soft_log: EpochLog,
    /// Smallest per-code gradient norm of the soft arm this epoch.
    pub soft_min_grad_norm: f64,
    pub hard_losses: HardLosses,
    /// Hard-arm codes whose values are bit-identical before and after.
    pub hard_unchanged_codes: usize,
    /// Hard-arm codes that won no token this epoch.
    pub hard_dead_codes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqComparison {
    pub epochs: Vec<VqEpoch>,
    pub soft_codebook: Codebook,
    pub hard_codebook: Codebook,
}

impl VqComparison {
    /// First epoch (1-based) at which an arm reaches full utilisation.
    pub fn epochs_to_full(&self, soft: bool) -> Option<usize> {
        self.epochs
            .iter()
            .map(|e| if soft { &e.soft } else { &e.hard })
            .find(|r| r.utilization >= 1.0)
            .map(|r| r.epoch)
    }
}

/// Train both arms on an identical token stream from an identical codebook.
/// Usage for epoch `e` is measured on that epoch's tokens before the update.
pub fn run_vq_comparison(config: &VqConfig) -> Result<VqComparison> {
    config.validate()?;
    let stream = TokenStream::new(config.tokens.clone(), config.seed)?;
    let init = config.initial_codebook()?;
    let soft_cfg = TrainerConfig { utilization_threshold: config.threshold, ..config.soft.clone() };
    let mut soft = TrainerState::new(Encoder::Identity, init.clone());
    let mut hard = init;
    let mut epochs = Vec::with_capacity(config.epochs);

    for e in 0..config.epochs {
        let tokens = stream.epoch(e).x;

        let t = soft_cfg.schedule.temperature(soft.epoch);
        let grads = objective_gradients(&soft, &tokens, t, &soft_cfg)?;
        let soft_min_grad_norm = grads
            .prototypes
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        let (_, q) = soft_quantize(&tokens, &soft.bank, t)?;
        let soft_rec = UtilizationRecord::new(e + 1, soft_usage(&q), config.threshold)?;
        let soft_log = train_epoch(&mut soft, &tokens, None, &soft_cfg)?;

        let (idx, next, hard_losses) = hard_quantize_step(&tokens, &hard, config.beta, config.hard_eta)?;
        let usage = hard_usage(&idx, config.k);
        let hard_dead_codes = usage.iter().filter(|&&u| u == 0.0).count();
        let mut hard_unchanged_codes = 0;
        for c in 0..config.k {
            let same = hard.prototype(c) == next.prototype(c);
            if usage[c] == 0.0 && !same {
                return Err(DdclError::invalid("hard codebook", format!("dead code {c} moved")));
            }
            hard_unchanged_codes += usize::from(same);
        }
        hard = next;

        epochs.push(VqEpoch {
            soft: soft_rec,
            hard: UtilizationRecord::new(e + 1, usage, config.threshold)?,
            soft_log,
            soft_min_grad_norm,
            hard_losses,
            hard_unchanged_codes,
            hard_dead_codes,
        });
    }
    Ok(VqComparison { epochs, soft_codebook: soft.bank, hard_codebook: hard })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::assign;
    use approx::assert_relative_eq;

    #[test]
    fn single_code_takes_everything() {
        let tokens = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]).unwrap();
        let cb = PrototypeBank::from_rows(&[[0.0, 0.0]]).unwrap();
        let (mu, q) = soft_quantize(&tokens, &cb, 1.0).unwrap();
        assert!(q.matrix().as_slice().iter().all(|&v| v == 1.0));
        assert!(mu.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sharp_self_assignment() {
        let cb = PrototypeBank::from_rows(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]).unwrap();
        let (mu, _) = soft_quantize(cb.matrix(), &cb, 0.01).unwrap();
        for (a, b) in mu.as_slice().iter().zip(cb.matrix().as_slice()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn soft_matches_layer_bitwise() {
        let mut rng = SeededRng::new(3);
        let tokens = Matrix::new(10, 3, (0..30).map(|_| rng.normal()).collect()).unwrap();
        let cb = PrototypeBank::new(Matrix::new(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap()).unwrap();
        let (mu, q) = soft_quantize(&tokens, &cb, 0.7).unwrap();
        let q2 = assign(&tokens, &cb, 0.7).unwrap();
        assert_eq!(q, q2);
        assert_eq!(mu, soft_centroids(&q2, &cb).unwrap());
    }

    #[test]
    fn only_selected_codes_move() {
        let tokens = Matrix::from_rows(&[[0.1, 0.0], [0.0, 0.2]]).unwrap();
        let cb = PrototypeBank::from_rows(&[[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]]).unwrap();
        let (idx, next, _) = hard_quantize_step(&tokens, &cb, 0.25, 0.1).unwrap();
        assert_eq!(idx, vec![0, 0]);
        assert_ne!(next.prototype(0), cb.prototype(0));
        assert_eq!(next.prototype(1), cb.prototype(1));
        assert_eq!(next.prototype(2), cb.prototype(2));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let tokens = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let cb = PrototypeBank::from_rows(&[[5.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(nearest_codes(&tokens, &cb).unwrap(), vec![1]);
    }

    #[test]
    fn single_token_scalar_recursion() {
        let z = 3.0;
        let eta = 0.1;
        let tokens = Matrix::from_rows(&[[z]]).unwrap();
        let mut cb = PrototypeBank::from_rows(&[[0.0]]).unwrap();
        let mut e = 0.0;
        for _ in 0..50 {
            e -= 2.0 * eta * (e - z);
            cb = hard_quantize_step(&tokens, &cb, 0.25, eta).unwrap().1;
            assert_relative_eq!(cb.prototype(0)[0], e, epsilon = 1e-12);
        }
        assert!((e - z).abs() < 1e-4);
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(&vec![1.0 / 64.0; 64], 0.01).unwrap(), 1.0);
        let usage = hard_usage(&[3; 10], 16);
        assert_eq!(utilization(&usage, 0.01).unwrap(), 1.0 / 16.0);
        assert!(utilization(&usage, 0.0).is_err());
    }

    #[test]
    fn small_comparison_runs() {
        let cfg = VqConfig {
            k: 8,
            epochs: 3,
            tokens: TokenStreamParams { tokens_per_epoch: 256, dim: 4, groups: 3, ..Default::default() },
            ..VqConfig::default()
        };
        let r = run_vq_comparison(&cfg).unwrap();
        assert_eq!(r.epochs.len(), 3);
        assert_eq!(r.epochs[0].soft.utilization, 1.0);
        assert!(r.epochs.iter().all(|e| e.soft_min_grad_norm > 0.0));
        assert_eq!(r, run_vq_comparison(&cfg).unwrap());
    }
}
