//! Two-timescale training: prototypes at rate `η_P`, encoder at `η_θ = ε·η_P`,
//! annealed temperature, elementwise gradient clipping and per-epoch audits.

use crate::error::{DdclError, Result};
use crate::exec::Backend;
use crate::layer::{distances_and_assignments, soft_centroids, PrototypeBank};
use crate::loss::{grad_embeddings_from, grad_prototypes_from, report_from, repulsion, FreeEnergyParams};
use crate::metrics::{assignment_entropy, clustering_score, prototype_separation};
use crate::numerics::{Matrix, PcaModel, SeededRng};
use crate::vq::{soft_usage, utilization};

/// `T(t) = max(T_min, T0·exp(−t/τ))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub t0: f64,
    pub t_min: f64,
    pub tau: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { t0: 2.0, t_min: 0.3, tau: 120.0 }
    }
}

impl AnnealSchedule {
    pub fn new(t0: f64, t_min: f64, tau: f64) -> Result<Self> {
        let s = Self { t0, t_min, tau };
        s.validate()?;
        Ok(s)
    }

    /// A schedule that stays at `t` forever.
    pub fn constant(t: f64) -> Self {
        Self { t0: t, t_min: t, tau: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min.is_finite()) {
            return Err(DdclError::invalid("t_min", format!("must be > 0, got {}", self.t_min)));
        }
        if !(self.t0 >= self.t_min && self.t0.is_finite()) {
            return Err(DdclError::invalid("t0", format!("must be >= t_min, got {}", self.t0)));
        }
        if !(self.tau > 0.0) {
            return Err(DdclError::invalid("tau", format!("must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        (self.t0 * (-(epoch as f64) / self.tau).exp()).max(self.t_min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub eta_p: f64,
    pub eta_theta: f64,
    /// Weight of the repulsion term; the term is skipped entirely at 0.
    pub lambda: f64,
    /// Task-loss weight. Kept for configuration completeness; unused by the
    /// unsupervised objective.
    pub lambda_q: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Treat the assignments as constants when differentiating.
    pub sg_on_q: bool,
    pub seed: u64,
    pub schedule: AnnealSchedule,
    /// Mini-batch size; `None` means full batch.
    pub batch_size: Option<usize>,
    pub utilization_threshold: f64,
    pub min_pair_dist_guard: f64,
    pub backend: Backend,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eta_p: 0.05,
            eta_theta: 0.0,
            lambda: 0.0,
            lambda_q: 0.1,
            clip: 2.0,
            epochs: 500,
            sg_on_q: false,
            seed: 42,
            schedule: AnnealSchedule::default(),
            batch_size: None,
            utilization_threshold: 0.01,
            min_pair_dist_guard: 1e-6,
            backend: Backend::default(),
        }
    }
}

impl TrainerConfig {
    /// `ε = η_θ / η_P`.
    pub fn epsilon(&self) -> f64 {
        self.eta_theta / self.eta_p
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.eta_theta = epsilon * self.eta_p;
        self
    }

    pub fn free_energy_params(&self) -> FreeEnergyParams {
        FreeEnergyParams { lambda: self.lambda, min_pair_dist_guard: self.min_pair_dist_guard }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_p >= 0.0 && self.eta_p.is_finite()) {
            return Err(DdclError::invalid("eta_p", format!("must be finite and >= 0, got {}", self.eta_p)));
        }
        if !(self.eta_theta >= 0.0 && self.eta_theta.is_finite()) {
            return Err(DdclError::invalid(
                "eta_theta",
                format!("must be finite and >= 0, got {}", self.eta_theta),
            ));
        }
        if !(self.clip > 0.0) {
            return Err(DdclError::invalid("clip", format!("must be > 0, got {}", self.clip)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DdclError::invalid("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.utilization_threshold > 0.0 && self.utilization_threshold < 1.0) {
            return Err(DdclError::invalid("utilization_threshold", "must lie in (0, 1)"));
        }
        if self.batch_size == Some(0) {
            return Err(DdclError::invalid("batch_size", "must be positive"));
        }
        if !(self.min_pair_dist_guard > 0.0) {
            return Err(DdclError::invalid("min_pair_dist_guard", "must be > 0"));
        }
        self.schedule.validate()
    }
}

/// Maps raw inputs to the embeddings the prototype layer sees.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Identity,
    /// Frozen projection; never updated.
    FixedPca(PcaModel),
    /// `z = W x` with trainable `W` (m × d).
    Linear(Matrix),
}

impl Encoder {
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Encoder::Identity => Ok(x.clone()),
            Encoder::FixedPca(model) => model.project(x),
            Encoder::Linear(w) => x.matmul_transpose(w),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Encoder::Linear(_))
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Encoder::Identity => input_dim,
            Encoder::FixedPca(model) => model.output_dim(),
            Encoder::Linear(w) => w.rows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub encoder: Encoder,
    pub bank: PrototypeBank,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainerState {
    pub fn new(encoder: Encoder, bank: PrototypeBank) -> Self {
        Self { encoder, bank, epoch: 0 }
    }
}

/// Diagnostics of one epoch, measured before that epoch's update.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub t: f64,
    pub l_q: f64,
    pub l_ols: f64,
    pub l_soft: f64,
    pub v_soft: f64,
    pub v_alg: f64,
    pub s_p: f64,
    pub h_q: f64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub min_q: f64,
    pub utilization: f64,
}

/// Gradients of one step, before clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGradients {
    pub prototypes: Matrix,
    /// Present only for a trainable encoder.
    pub encoder: Option<Matrix>,
}

fn require_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(DdclError::NonFiniteGradient(what))
    }
}

fn clip_in_place(m: &mut Matrix, clip: f64) {
    for v in m.as_mut_slice() {
        *v = v.clamp(-clip, clip);
    }
}

/// Gradients of `L_q` (plus repulsion when `λ > 0`) for the state's
/// parameters on batch `x` at temperature `t`.
pub fn objective_gradients(
    state: &TrainerState,
    x: &Matrix,
    t: f64,
    config: &TrainerConfig,
) -> Result<StepGradients> {
    let backend = config.backend;
    let z = state.encoder.encode(x)?;
    let (d, q) = distances_and_assignments(backend, &z, &state.bank, t)?;
    let mut g_p = grad_prototypes_from(backend, &z, &state.bank, &d, &q, t, config.sg_on_q);
    if config.lambda > 0.0 {
        let (_, g_rep) = repulsion(&state.bank, &config.free_energy_params())?;
        g_p.axpy(1.0, &g_rep)?;
    }
    let encoder = match &state.encoder {
        Encoder::Linear(_) => {
            let mu = soft_centroids(&q, &state.bank)?;
            let g_z = grad_embeddings_from(backend, &z, &state.bank, &d, &q, &mu, t, config.sg_on_q);
            Some(g_z.transpose().matmul(x)?)
        }
        _ => None,
    };
    Ok(StepGradients { prototypes: g_p, encoder })
}

fn apply_step(state: &mut TrainerState, x: &Matrix, t: f64, config: &TrainerConfig) -> Result<()> {
    let StepGradients { prototypes: mut g_p, encoder } = objective_gradients(state, x, t, config)?;
    require_finite(&g_p, "prototypes")?;
    clip_in_place(&mut g_p, config.clip);
    if let (Encoder::Linear(w), Some(mut g_w)) = (&mut state.encoder, encoder) {
        require_finite(&g_w, "encoder")?;
        clip_in_place(&mut g_w, config.clip);
        if config.eta_theta > 0.0 {
            w.axpy(-config.eta_theta, &g_w)?;
        }
    }
    if config.eta_p > 0.0 {
        state.bank.matrix_mut().axpy(-config.eta_p, &g_p)?;
    }
    Ok(())
}

/// Diagnostics for the current state on the full data at temperature `t`.
/// Fails with the full loss report if the decomposition invariants break.
pub fn evaluate(
    state: &TrainerState,
    x: &Matrix,
    labels: Option<&[usize]>,
    t: f64,
    config: &TrainerConfig,
) -> Result<EpochLog> {
    let backend = config.backend;
    let z = state.encoder.encode(x)?;
    let (d, q) = distances_and_assignments(backend, &z, &state.bank, t)?;
    let mu = soft_centroids(&q, &state.bank)?;
    let report = report_from(backend, &z, &state.bank, &d, &q, &mu);
    report.check()?;
    let s_p = if state.bank.k() >= 2 { prototype_separation(&state.bank)? } else { 0.0 };
    let score = match labels {
        Some(y) => Some(clustering_score(&q.argmax_labels(), y)?),
        None => None,
    };
    Ok(EpochLog {
        epoch: state.epoch,
        t,
        l_q: report.l_q,
        l_ols: report.l_ols,
        l_soft: report.l_soft,
        v_soft: report.v_soft,
        v_alg: report.v_alg,
        s_p,
        h_q: assignment_entropy(&q),
        acc: score.as_ref().map(|s| s.acc),
        nmi: score.as_ref().map(|s| s.nmi),
        ari: score.as_ref().map(|s| s.ari),
        min_q: q.min_entry(),
        utilization: utilization(&soft_usage(&q), config.utilization_threshold)?,
    })
}

/// One epoch: diagnostics on the pre-update state, then the gradient step(s).
pub fn train_epoch(
    state: &mut TrainerState,
    x: &Matrix,
    labels: Option<&[usize]>,
    config: &TrainerConfig,
) -> Result<EpochLog> {
    if x.rows() == 0 {
        return Err(DdclError::EmptyInput("training data"));
    }
    if labels.is_some_and(|y| y.len() != x.rows()) {
        return Err(DdclError::DimensionMismatch {
            context: "training labels",
            expected: x.rows(),
            got: labels.map_or(0, <[usize]>::len),
        });
    }
    let t = config.schedule.temperature(state.epoch);
    let log = evaluate(state, x, labels, t, config)?;
    match config.batch_size {
        Some(b) if b < x.rows() => {
            let mut order: Vec<usize> = (0..x.rows()).collect();
            let mut rng = SeededRng::new(config.seed).split(state.epoch as u64);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.index(i + 1));
            }
            for chunk in order.chunks(b) {
                apply_step(state, &x.select_rows(chunk), t, config)?;
            }
        }
        _ => apply_step(state, x, t, config)?,
    }
    state.epoch += 1;
    Ok(log)
}

/// Run `config.epochs` epochs, calling `on_epoch` with each log and the
/// post-update state.
pub fn train_with<F>(
    state: &mut TrainerState,
    x: &Matrix,
    labels: Option<&[usize]>,
    config: &TrainerConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &TrainerState) -> Result<()>,
{
    config.validate()?;
    let mut logs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let log = train_epoch(state, x, labels, config)?;
        on_epoch(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

pub fn train(
    state: &mut TrainerState,
    x: &Matrix,
    labels: Option<&[usize]>,
    config: &TrainerConfig,
) -> Result<Vec<EpochLog>> {
    train_with(state, x, labels, config, |_, _| Ok(()))
}
