use crate::error::{DdclError, Result};
use crate::exec;
use crate::numerics::Matrix;
use crate::trainer::{train, EpochLog, TrainerConfig, TrainerState};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub epsilon: f64,
    /// Best per-epoch accuracy, or `None` without labels.
    pub best_acc: Option<f64>,
    pub initial_s_p: f64,
    /// Separation after the last update.
    pub final_s_p: f64,
    pub logs: Vec<EpochLog>,
    pub final_state: TrainerState,
}

impl AblationRow {
    /// First epoch whose logged separation is below `fraction` of the
    /// initial one.
    pub fn collapse_epoch(&self, fraction: f64) -> Option<usize> {
        self.logs
            .iter()
            .find(|l| l.s_p < fraction * self.initial_s_p)
            .map(|l| l.epoch)
    }
}

/// One training run per `ε` with `η_θ = ε·η_P`, all from the same initial
/// state and data. Runs may execute concurrently; rows come back sorted by `ε`.
pub fn ablation_sweep(
    epsilons: &[f64],
    base: &TrainerConfig,
    initial: &TrainerState,
    x: &Matrix,
    labels: Option<&[usize]>,
) -> Result<Vec<AblationRow>> {
    if let Some(&bad) = epsilons.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
        return Err(DdclError::invalid("epsilon", format!("must be finite and > 0, got {bad}")));
    }
    base.validate()?;
    let mut eps = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    let rows = exec::map_indices(base.backend, eps.len(), |i| {
        let config = base.clone().with_epsilon(eps[i]);
        let mut state = initial.clone();
        let logs = train(&mut state, x, labels, &config)?;
        let initial_s_p = match logs.first() {
            Some(l) => l.s_p,
            None => crate::metrics::prototype_separation(&initial.bank)?,
        };
        let final_s_p = crate::metrics::prototype_separation(&state.bank)?;
        let best_acc = logs.iter().filter_map(|l| l.acc).fold(None, |b: Option<f64>, a| Some(b.map_or(a, |b| b.max(a))));
        Ok(AblationRow { epsilon: eps[i], best_acc, initial_s_p, final_s_p, logs, final_state: state })
    });
    rows.into_iter().collect()
}
