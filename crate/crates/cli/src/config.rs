//! Experiment configuration files (TOML). Every section is optional and
//! every key overrides the matching library default.

use std::path::{Path, PathBuf};

use ddcl_core::data::{BlobParams, CorpusParams, DebrisParams, TokenStreamParams};
use ddcl_core::hierarchy::HierarchyConfig;
use ddcl_core::trainer::{AnnealSchedule, TrainerConfig};
use ddcl_core::vq::VqConfig;
use ddcl_core::Backend;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Debris,
    Ablation,
    Vq,
    Hierarchy,
    Gradcheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Debris => "debris",
            Experiment::Ablation => "ablation",
            Experiment::Vq => "vq",
            Experiment::Hierarchy => "hierarchy",
            Experiment::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub eta_p: Option<f64>,
    pub eta_theta: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_q: Option<f64>,
    pub clip: Option<f64>,
    pub epochs: Option<usize>,
    pub sg_on_q: Option<bool>,
    pub t0: Option<f64>,
    pub t_min: Option<f64>,
    pub tau: Option<f64>,
    pub batch_size: Option<usize>,
    pub utilization_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebrisSection {
    pub per_class: Option<usize>,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub pca_components: Option<usize>,
    pub kmeans_restarts: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSection {
    pub k: Option<usize>,
    pub per_class: Option<usize>,
    pub dim: Option<usize>,
    pub spread: Option<f64>,
    pub separation: Option<f64>,
    pub kmeans_restarts: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub epsilons: Option<Vec<f64>>,
    /// Fraction of the initial separation that counts as collapsed.
    pub collapse_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqSection {
    pub k: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub threshold: Option<f64>,
    pub hard_eta: Option<f64>,
    pub beta: Option<f64>,
    pub groups: Option<usize>,
    pub dim: Option<usize>,
    pub tokens_per_epoch: Option<usize>,
    pub center_scale: Option<f64>,
    pub spread: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub topics: Option<usize>,
    pub docs_per_topic: Option<usize>,
    pub tokens_per_doc: Option<usize>,
    pub dim: Option<usize>,
    pub subtopics: Option<usize>,
    pub topic_spread: Option<f64>,
    pub subtopic_spread: Option<f64>,
    pub token_noise: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchySection {
    pub k1: Option<usize>,
    pub m1: Option<usize>,
    pub k2: Option<usize>,
    pub m2: Option<usize>,
    pub eta_p2: Option<f64>,
    pub full_backprop: Option<bool>,
    pub kmeans_restarts: Option<usize>,
    pub kmeans_stride: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub instances: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub debris: DebrisSection,
    #[serde(default)]
    pub blobs: BlobsSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub vq: VqSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub hierarchy: HierarchySection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

fn default_seed() -> u64 {
    42
}

macro_rules! set {
    ($target:expr, $source:expr) => {
        if let Some(v) = $source.clone() {
            $target = v;
        }
    };
}

pub const DEFAULT_EPSILONS: [f64; 5] = [0.001, 0.01, 0.1, 0.5, 1.0];

/// Blob data and trainer used by the learning-rate-ratio ablation when the
/// config does not override them.
pub fn ablation_defaults() -> (BlobParams, TrainerConfig) {
    let blobs = BlobParams { separation: 2.0, ..BlobParams::new(10, 100, 32, 0.05) };
    let trainer = TrainerConfig {
        eta_p: 0.5,
        epochs: 300,
        schedule: AnnealSchedule { t0: 4.0, t_min: 0.1, tau: 5.0 },
        ..TrainerConfig::default()
    };
    (blobs, trainer)
}

/// Hierarchy trainer defaults: `ε = 0.05`, `λ = 1.5`, 15 epochs.
pub fn hierarchy_trainer_defaults() -> TrainerConfig {
    TrainerConfig { epochs: 15, lambda: 1.5, ..TrainerConfig::default() }.with_epsilon(0.05)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    /// Apply the `[trainer]` overrides to an experiment-specific base.
    pub fn trainer_config(&self, mut base: TrainerConfig, backend: Backend) -> CliResult<TrainerConfig> {
        let t = &self.trainer;
        let base_epsilon = base.epsilon();
        set!(base.eta_p, t.eta_p);
        set!(base.lambda, t.lambda);
        set!(base.lambda_q, t.lambda_q);
        set!(base.clip, t.clip);
        set!(base.epochs, t.epochs);
        set!(base.sg_on_q, t.sg_on_q);
        set!(base.schedule.t0, t.t0);
        set!(base.schedule.t_min, t.t_min);
        set!(base.schedule.tau, t.tau);
        set!(base.utilization_threshold, t.utilization_threshold);
        if t.batch_size.is_some() {
            base.batch_size = t.batch_size;
        }
        match (t.eta_theta, t.epsilon) {
            (Some(_), Some(_)) => {
                return Err(CliError::config("trainer: give either eta_theta or epsilon, not both"))
            }
            (Some(e), None) => base.eta_theta = e,
            (None, Some(eps)) => {
                if !(eps >= 0.0 && eps.is_finite()) {
                    return Err(CliError::config(format!("trainer.epsilon must be finite and >= 0, got {eps}")));
                }
                base = base.with_epsilon(eps);
            }
            (None, None) => base = base.with_epsilon(base_epsilon),
        }
        if !(base.eta_p > 0.0) {
            return Err(CliError::config(format!("trainer.eta_p must be > 0, got {}", base.eta_p)));
        }
        base.seed = self.seed;
        base.backend = backend;
        base.validate()?;
        Ok(base)
    }

    pub fn debris_params(&self) -> (DebrisParams, usize, usize) {
        let d = &self.debris;
        let mut p = DebrisParams::default();
        set!(p.per_class, d.per_class);
        set!(p.sigma_min, d.sigma_min);
        set!(p.sigma_max, d.sigma_max);
        (p, d.pca_components.unwrap_or(5), d.kmeans_restarts.unwrap_or(10))
    }

    pub fn blob_params(&self) -> (BlobParams, usize) {
        let b = &self.blobs;
        let (mut p, _) = ablation_defaults();
        set!(p.k, b.k);
        set!(p.per_class, b.per_class);
        set!(p.dim, b.dim);
        set!(p.spread, b.spread);
        set!(p.separation, b.separation);
        (p, b.kmeans_restarts.unwrap_or(10))
    }

    pub fn ablation_epsilons(&self) -> CliResult<(Vec<f64>, f64)> {
        let eps = self.ablation.epsilons.clone().unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
        if eps.is_empty() {
            return Err(CliError::config("ablation.epsilons must not be empty"));
        }
        if let Some(bad) = eps.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(CliError::config(format!("ablation.epsilons must be finite and > 0, got {bad}")));
        }
        let fraction = self.ablation.collapse_fraction.unwrap_or(0.01);
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CliError::config(format!("ablation.collapse_fraction must lie in (0, 1), got {fraction}")));
        }
        Ok((eps, fraction))
    }

    pub fn vq_configs(&self, backend: Backend) -> CliResult<Vec<VqConfig>> {
        let v = &self.vq;
        let mut base = VqConfig { seed: self.seed, ..VqConfig::default() };
        set!(base.epochs, v.epochs);
        set!(base.threshold, v.threshold);
        set!(base.hard_eta, v.hard_eta);
        set!(base.beta, v.beta);
        let mut tokens = TokenStreamParams::default();
        set!(tokens.groups, v.groups);
        set!(tokens.dim, v.dim);
        set!(tokens.tokens_per_epoch, v.tokens_per_epoch);
        set!(tokens.center_scale, v.center_scale);
        set!(tokens.spread, v.spread);
        base.tokens = tokens;
        let mut soft = VqConfig::default().soft;
        soft.epochs = base.epochs;
        soft.utilization_threshold = base.threshold;
        base.soft = self.trainer_config(soft, backend)?;
        base.soft.epochs = base.epochs;
        let ks = v.k.clone().unwrap_or_else(|| vec![16, 64]);
        if ks.is_empty() {
            return Err(CliError::config("vq.k must not be empty"));
        }
        let configs: Vec<VqConfig> = ks.into_iter().map(|k| VqConfig { k, ..base.clone() }).collect();
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }

    pub fn corpus_params(&self) -> CorpusParams {
        let c = &self.corpus;
        let mut p = CorpusParams::default();
        set!(p.topics, c.topics);
        set!(p.docs_per_topic, c.docs_per_topic);
        set!(p.tokens_per_doc, c.tokens_per_doc);
        set!(p.dim, c.dim);
        set!(p.subtopics, c.subtopics);
        set!(p.topic_spread, c.topic_spread);
        set!(p.subtopic_spread, c.subtopic_spread);
        set!(p.token_noise, c.token_noise);
        p
    }

    pub fn hierarchy_config(&self, trainer: &TrainerConfig) -> CliResult<HierarchyConfig> {
        let h = &self.hierarchy;
        let mut cfg = HierarchyConfig { eta_p2: trainer.eta_p, ..HierarchyConfig::default() };
        set!(cfg.k1, h.k1);
        set!(cfg.m1, h.m1);
        set!(cfg.k2, h.k2);
        set!(cfg.m2, h.m2);
        set!(cfg.eta_p2, h.eta_p2);
        set!(cfg.full_backprop, h.full_backprop);
        set!(cfg.kmeans_restarts, h.kmeans_restarts);
        set!(cfg.kmeans_stride, h.kmeans_stride);
        cfg.validate(self.corpus_params().dim)?;
        Ok(cfg)
    }

    pub fn gradcheck_instances(&self) -> CliResult<usize> {
        match self.gradcheck.instances.unwrap_or(20) {
            0 => Err(CliError::config("gradcheck.instances must be >= 1")),
            n => Ok(n),
        }
    }
}
