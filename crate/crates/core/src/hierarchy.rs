//! Two stacked prototype layers: token-level assignments, mean pooling of the
//! level-1 soft centroids per document, a fixed linear projection, and
//! document-level assignments. Each level keeps its own decomposition audit.

use crate::data::{kmeans_init_with, Corpus};
use crate::error::{DdclError, Result};
use crate::exec::Backend;
use crate::layer::{distances_and_assignments, soft_centroids, AssignmentMatrix, PrototypeBank};
use crate::loss::{grad_embeddings_from, grad_prototypes_from, report_from, repulsion, separation_force, LossReport};
use crate::metrics::{assignment_entropy, clustering_score, prototype_separation, ClusteringScore};
use crate::numerics::{pca_fit, Matrix, PcaModel};
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyConfig {
    pub k1: usize,
    pub m1: usize,
    pub k2: usize,
    pub m2: usize,
    /// Level-2 prototype learning rate.
    pub eta_p2: f64,
    /// Let level-2 gradients flow back through pooling into level 1.
    pub full_backprop: bool,
    pub kmeans_restarts: usize,
    /// Every `kmeans_stride`-th token is used to initialise level 1.
    pub kmeans_stride: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            k1: 32,
            m1: 64,
            k2: 20,
            m2: 16,
            eta_p2: 0.05,
            full_backprop: false,
            kmeans_restarts: 10,
            kmeans_stride: 8,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self, token_dim: usize) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.m1 == 0 || self.m2 == 0 {
            return Err(DdclError::invalid("hierarchy", "K1, K2, m1, m2 must be >= 1"));
        }
        if self.m1 > token_dim {
            return Err(DdclError::invalid(
                "m1",
                format!("level-1 width {} exceeds token dimension {token_dim}", self.m1),
            ));
        }
        // pooled level-1 centroids live in the affine hull of K1 prototypes
        if self.m2 > self.k1.saturating_sub(1) {
            return Err(DdclError::invalid(
                "m2",
                format!("projection width {} needs K1-1 >= m2 (K1 = {})", self.m2, self.k1),
            ));
        }
        if !(self.eta_p2 >= 0.0 && self.eta_p2.is_finite()) {
            return Err(DdclError::invalid("eta_p2", "must be finite and >= 0"));
        }
        if self.kmeans_restarts == 0 || self.kmeans_stride == 0 {
            return Err(DdclError::invalid("kmeans", "restarts and stride must be >= 1"));
        }
        Ok(())
    }
}

/// Parameters of both levels.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyModel {
    /// Level-1 encoder `W1` (m1 × d_tok).
    pub w1: Matrix,
    pub bank1: PrototypeBank,
    /// Fixed pooled-centroid projection m1 → m2.
    pub projection: PcaModel,
    pub bank2: PrototypeBank,
}

/// Decomposition and diagnostics of one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelStats {
    pub report: LossReport,
    pub s_p: f64,
    pub h_q: f64,
}

impl LevelStats {
    fn new(report: LossReport, bank: &PrototypeBank, q: &AssignmentMatrix) -> Result<Self> {
        let s_p = if bank.k() >= 2 { prototype_separation(bank)? } else { 0.0 };
        Ok(Self { report, s_p, h_q: assignment_entropy(q) })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelAudit {
    pub level1: LevelStats,
    pub level2: LevelStats,
    /// `L_q^(1) + L_q^(2)`.
    pub total_l_q: f64,
}

impl LevelAudit {
    pub fn check(&self) -> Result<()> {
        self.level1.report.check()?;
        self.level2.report.check()
    }
}

/// Token matrices stacked in document order with row offsets.
#[derive(Clone, Debug)]
struct Stacked {
    x: Matrix,
    offsets: Vec<usize>,
}

fn stack(docs: &[Matrix]) -> Result<Stacked> {
    if docs.is_empty() {
        return Err(DdclError::EmptyInput("documents"));
    }
    let d = docs[0].cols();
    let mut offsets = vec![0];
    let mut data = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if doc.rows() == 0 {
            return Err(DdclError::invalid("docs", format!("document {i} has no tokens")));
        }
        if doc.cols() != d {
            return Err(DdclError::DimensionMismatch { context: "document width", expected: d, got: doc.cols() });
        }
        data.extend_from_slice(doc.as_slice());
        offsets.push(offsets.last().unwrap() + doc.rows());
    }
    let n = *offsets.last().unwrap();
    Ok(Stacked { x: Matrix::new(n, d, data)?, offsets })
}

fn mean_pool(mu: &Matrix, offsets: &[usize]) -> Matrix {
    let docs = offsets.len() - 1;
    let mut pooled = Matrix::zeros(docs, mu.cols());
    for d in 0..docs {
        let (a, b) = (offsets[d], offsets[d + 1]);
        let inv = 1.0 / (b - a) as f64;
        let row = pooled.row_mut(d);
        for n in a..b {
            for (p, v) in row.iter_mut().zip(mu.row(n)) {
                *p += v;
            }
        }
        row.iter_mut().for_each(|p| *p *= inv);
    }
    pooled
}

/// Everything computed by one forward pass, kept for the backward pass.
struct Pass {
    z1: Matrix,
    d1: Matrix,
    q1: AssignmentMatrix,
    mu1: Matrix,
    y: Matrix,
    d2: Matrix,
    q2: AssignmentMatrix,
    mu2: Matrix,
    audit: LevelAudit,
}

fn forward_pass(backend: Backend, stacked: &Stacked, model: &HierarchyModel, t1: f64, t2: f64) -> Result<Pass> {
    let z1 = stacked.x.matmul_transpose(&model.w1)?;
    let (d1, q1) = distances_and_assignments(backend, &z1, &model.bank1, t1)?;
    let mu1 = soft_centroids(&q1, &model.bank1)?;
    let r1 = report_from(backend, &z1, &model.bank1, &d1, &q1, &mu1);

    let y = model.projection.project(&mean_pool(&mu1, &stacked.offsets))?;
    let (d2, q2) = distances_and_assignments(backend, &y, &model.bank2, t2)?;
    let mu2 = soft_centroids(&q2, &model.bank2)?;
    let r2 = report_from(backend, &y, &model.bank2, &d2, &q2, &mu2);

    let audit = LevelAudit {
        level1: LevelStats::new(r1, &model.bank1, &q1)?,
        level2: LevelStats::new(r2, &model.bank2, &q2)?,
        total_l_q: r1.l_q + r2.l_q,
    };
    Ok(Pass { z1, d1, q1, mu1, y, d2, q2, mu2, audit })
}

/// Level-2 assignments per document and the audit of both levels.
pub fn two_level_forward(
    docs: &[Matrix],
    model: &HierarchyModel,
    t1: f64,
    t2: f64,
) -> Result<(AssignmentMatrix, LevelAudit)> {
    let stacked = stack(docs)?;
    let pass = forward_pass(Backend::default(), &stacked, model, t1, t2)?;
    Ok((pass.q2, pass.audit))
}

/// Initial model: `W1` is the identity when `m1 = d_tok` and the leading
/// principal directions of the tokens otherwise; level-1 prototypes from
/// k-means on a token subsample; the projection is a PCA of the pooled
/// level-1 centroids at temperature `t0`; level-2 prototypes from k-means
/// on the projected documents.
pub fn init_hierarchy(corpus: &Corpus, cfg: &HierarchyConfig, t0: f64, seed: u64) -> Result<HierarchyModel> {
    cfg.validate(corpus.dim)?;
    let stacked = stack(&corpus.docs)?;
    let w1 = if cfg.m1 == corpus.dim {
        Matrix::identity(cfg.m1)
    } else {
        pca_fit(&stacked.x, cfg.m1)?.components
    };
    let z1 = stacked.x.matmul_transpose(&w1)?;
    let idx: Vec<usize> = (0..z1.rows()).step_by(cfg.kmeans_stride).collect();
    let bank1 = kmeans_init_with(Backend::default(), &z1.select_rows(&idx), cfg.k1, cfg.kmeans_restarts, seed)?.bank;
    let (_, q1) = distances_and_assignments(Backend::default(), &z1, &bank1, t0)?;
    let pooled = mean_pool(&soft_centroids(&q1, &bank1)?, &stacked.offsets);
    let projection = pca_fit(&pooled, cfg.m2)?;
    let y = projection.project(&pooled)?;
    let bank2 = kmeans_init_with(Backend::default(), &y, cfg.k2, cfg.kmeans_restarts, seed.wrapping_add(1))?.bank;
    Ok(HierarchyModel { w1, bank1, projection, bank2 })
}

/// Gradients of `L_q^(1) + L_q^(2)` (plus repulsion) for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyGradients {
    pub w1: Matrix,
    pub bank1: Matrix,
    pub bank2: Matrix,
}

fn gradients(
    backend: Backend,
    stacked: &Stacked,
    model: &HierarchyModel,
    pass: &Pass,
    t1: f64,
    t2: f64,
    trainer: &TrainerConfig,
    full_backprop: bool,
) -> Result<HierarchyGradients> {
    let sg = trainer.sg_on_q;
    let mut g_p1 = grad_prototypes_from(backend, &pass.z1, &model.bank1, &pass.d1, &pass.q1, t1, sg);
    let mut g_z1 = grad_embeddings_from(backend, &pass.z1, &model.bank1, &pass.d1, &pass.q1, &pass.mu1, t1, sg);
    let mut g_p2 = grad_prototypes_from(backend, &pass.y, &model.bank2, &pass.d2, &pass.q2, t2, sg);

    if full_backprop {
        // dL2/dy per document, back through the projection and the pooling
        let g_y = grad_embeddings_from(backend, &pass.y, &model.bank2, &pass.d2, &pass.q2, &pass.mu2, t2, false);
        let g_pooled = g_y.matmul(&model.projection.components)?;
        let (k1, m1) = (model.bank1.k(), model.bank1.dim());
        for d in 0..stacked.offsets.len() - 1 {
            let (a, b) = (stacked.offsets[d], stacked.offsets[d + 1]);
            let inv = 1.0 / (b - a) as f64;
            let up: Vec<f64> = g_pooled.row(d).iter().map(|v| v * inv).collect();
            for n in a..b {
                let (z, mu, q) = (pass.z1.row(n), pass.mu1.row(n), pass.q1.row(n));
                for k in 0..k1 {
                    let p = model.bank1.prototype(k);
                    let a_dot: f64 = up.iter().zip(p).zip(mu).map(|((u, pv), mv)| u * (pv - mv)).sum();
                    let c = 2.0 / t1 * q[k] * a_dot;
                    let gp = g_p1.row_mut(k);
                    for j in 0..m1 {
                        gp[j] += q[k] * up[j] - c * (p[j] - z[j]);
                    }
                    let gz = g_z1.row_mut(n);
                    for j in 0..m1 {
                        gz[j] += c * (p[j] - mu[j]);
                    }
                }
            }
        }
    }

    if trainer.lambda > 0.0 {
        let fe = trainer.free_energy_params();
        g_p1.axpy(1.0, &repulsion(&model.bank1, &fe)?.1)?;
        g_p2.axpy(1.0, &repulsion(&model.bank2, &fe)?.1)?;
    }
    let g_w1 = g_z1.transpose().matmul(&stacked.x)?;
    Ok(HierarchyGradients { w1: g_w1, bank1: g_p1, bank2: g_p2 })
}

/// Analytic gradients of the summed two-level loss at the current model.
pub fn hierarchy_gradients(
    docs: &[Matrix],
    model: &HierarchyModel,
    t1: f64,
    t2: f64,
    trainer: &TrainerConfig,
    full_backprop: bool,
) -> Result<HierarchyGradients> {
    let stacked = stack(docs)?;
    let backend = trainer.backend;
    let pass = forward_pass(backend, &stacked, model, t1, t2)?;
    gradients(backend, &stacked, model, &pass, t1, t2, trainer, full_backprop)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyEpoch {
    pub epoch: usize,
    pub t: f64,
    pub audit: LevelAudit,
    /// Level-2 clustering quality against the document topics.
    pub score: ClusteringScore,
}

fn clip_step(param: &mut Matrix, mut grad: Matrix, eta: f64, clip: f64, what: &'static str) -> Result<()> {
    if !grad.is_finite() {
        return Err(DdclError::NonFiniteGradient(what));
    }
    if eta == 0.0 {
        return Ok(());
    }
    grad.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
    param.axpy(-eta, &grad)
}

/// Train both levels on the summed loss. Level 1 uses `trainer.eta_p` and
/// `trainer.eta_theta`; level 2 uses `cfg.eta_p2`. Both levels share the
/// annealing schedule. Aborts on the first audit violation.
pub fn train_hierarchy(
    corpus: &Corpus,
    model: &mut HierarchyModel,
    cfg: &HierarchyConfig,
    trainer: &TrainerConfig,
) -> Result<Vec<HierarchyEpoch>> {
    cfg.validate(corpus.dim)?;
    trainer.validate()?;
    let stacked = stack(&corpus.docs)?;
    let backend = trainer.backend;
    let mut out = Vec::with_capacity(trainer.epochs);
    for epoch in 0..trainer.epochs {
        let t = trainer.schedule.temperature(epoch);
        let pass = forward_pass(backend, &stacked, model, t, t)?;
        pass.audit.check()?;
        let score = clustering_score(&pass.q2.argmax_labels(), &corpus.topics)?;
        let g = gradients(backend, &stacked, model, &pass, t, t, trainer, cfg.full_backprop)?;
        clip_step(&mut model.w1, g.w1, trainer.eta_theta, trainer.clip, "level-1 encoder")?;
        let mut p1 = model.bank1.matrix().clone();
        clip_step(&mut p1, g.bank1, trainer.eta_p, trainer.clip, "level-1 prototypes")?;
        model.bank1 = PrototypeBank::new(p1)?;
        let mut p2 = model.bank2.matrix().clone();
        clip_step(&mut p2, g.bank2, cfg.eta_p2, trainer.clip, "level-2 prototypes")?;
        model.bank2 = PrototypeBank::new(p2)?;
        out.push(HierarchyEpoch { epoch, t, audit: pass.audit, score });
    }
    Ok(out)
}

/// Evidence that the levels' separation forces are decoupled.
#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingReport {
    /// Largest finite-difference derivative of `V_soft^(1)` with respect to
    /// any level-2 prototype coordinate.
    pub max_dv1_dp2: f64,
    /// The level-1 separation force is bit-identical after replacing the
    /// level-2 bank.
    pub force_unchanged: bool,
}

pub fn decoupling_check(
    docs: &[Matrix],
    model: &HierarchyModel,
    perturbed_bank2: &PrototypeBank,
    t1: f64,
    t2: f64,
) -> Result<DecouplingReport> {
    let stacked = stack(docs)?;
    let backend = Backend::default();
    let v1 = |m: &HierarchyModel| -> Result<f64> {
        Ok(forward_pass(backend, &stacked, m, t1, t2)?.audit.level1.report.v_soft)
    };
    let force = |m: &HierarchyModel| -> Result<Matrix> {
        let z1 = stacked.x.matmul_transpose(&m.w1)?;
        let (_, q1) = distances_and_assignments(backend, &z1, &m.bank1, t1)?;
        separation_force(&m.bank1, &q1)
    };
    let h = 1e-6;
    let mut max_dv1_dp2: f64 = 0.0;
    for i in 0..model.bank2.k() * model.bank2.dim() {
        let mut plus = model.bank2.matrix().clone();
        let mut minus = plus.clone();
        plus.as_mut_slice()[i] += h;
        minus.as_mut_slice()[i] -= h;
        let mp = HierarchyModel { bank2: PrototypeBank::new(plus)?, ..model.clone() };
        let mm = HierarchyModel { bank2: PrototypeBank::new(minus)?, ..model.clone() };
        max_dv1_dp2 = max_dv1_dp2.max(((v1(&mp)? - v1(&mm)?) / (2.0 * h)).abs());
    }
    let swapped = HierarchyModel { bank2: perturbed_bank2.clone(), ..model.clone() };
    Ok(DecouplingReport { max_dv1_dp2, force_unchanged: force(model)? == force(&swapped)? })
}
