use crate::error::Result;
use crate::layer::PrototypeBank;
use crate::loss::{free_energy, FreeEnergyParams};
use crate::numerics::Matrix;
use crate::trainer::{train_with, EpochLog, TrainerConfig, TrainerState};

/// An increase of `W` larger than this fraction of `|W|` counts as a violation.
pub const LYAPUNOV_REL_TOL: f64 = 1e-6;

/// Embeddings, prototypes and temperature at one point of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub z: Matrix,
    pub bank: PrototypeBank,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovReport {
    /// `W` at every snapshot.
    pub values: Vec<f64>,
    /// `W_{s+1} − W_s`.
    pub deltas: Vec<f64>,
    pub violations: usize,
    /// Largest `ΔW / |W_s|` over all steps (negative when `W` always fell).
    pub max_relative_increase: f64,
}

pub fn lyapunov_audit(trajectory: &[Snapshot], params: &FreeEnergyParams) -> Result<LyapunovReport> {
    let values = trajectory
        .iter()
        .map(|s| free_energy(&s.z, &s.bank, s.t, params))
        .collect::<Result<Vec<f64>>>()?;
    let deltas: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let mut violations = 0;
    let mut max_relative_increase = f64::NEG_INFINITY;
    for (d, w) in deltas.iter().zip(&values) {
        if *d > LYAPUNOV_REL_TOL * w.abs() {
            violations += 1;
        }
        let rel = if *w == 0.0 { *d } else { d / w.abs() };
        max_relative_increase = max_relative_increase.max(rel);
    }
    if deltas.is_empty() {
        max_relative_increase = 0.0;
    }
    Ok(LyapunovReport { values, deltas, violations, max_relative_increase })
}

/// Train while recording the initial state and the state after every epoch,
/// each paired with the temperature of the epoch that follows it.
pub fn record_trajectory(
    state: &mut TrainerState,
    x: &Matrix,
    config: &TrainerConfig,
) -> Result<(Vec<EpochLog>, Vec<Snapshot>)> {
    let snapshot = |s: &TrainerState| -> Result<Snapshot> {
        Ok(Snapshot {
            z: s.encoder.encode(x)?,
            bank: s.bank.clone(),
            t: config.schedule.temperature(s.epoch),
        })
    };
    let mut snaps = vec![snapshot(state)?];
    let logs = train_with(state, x, None, config, |_, s| {
        snaps.push(snapshot(s)?);
        Ok(())
    })?;
    Ok((logs, snaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, kmeans_init, BlobParams};
    use crate::trainer::{AnnealSchedule, Encoder};

    fn setup() -> (Matrix, TrainerState) {
        let ds = generate_blobs(&BlobParams { separation: 3.0, ..BlobParams::new(3, 20, 3, 0.6) }, 4).unwrap();
        let fit = kmeans_init(&ds.x, 3, 4, 4).unwrap();
        (ds.x, TrainerState::new(Encoder::Identity, fit.bank))
    }

    #[test]
    fn zero_rate_is_constant() {
        let (x, mut state) = setup();
        let cfg = TrainerConfig { eta_p: 0.0, epochs: 5, schedule: AnnealSchedule::constant(1.0), ..Default::default() };
        let (_, snaps) = record_trajectory(&mut state, &x, &cfg).unwrap();
        let r = lyapunov_audit(&snaps, &cfg.free_energy_params()).unwrap();
        assert_eq!(r.values.len(), 6);
        assert!(r.deltas.iter().all(|&d| d == 0.0));
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn small_steps_descend() {
        let (x, mut state) = setup();
        let cfg = TrainerConfig {
            eta_p: 1e-3,
            lambda: 0.01,
            epochs: 40,
            schedule: AnnealSchedule { t0: 2.0, t_min: 0.3, tau: 10.0 },
            ..Default::default()
        };
        let (_, snaps) = record_trajectory(&mut state, &x, &cfg).unwrap();
        let r = lyapunov_audit(&snaps, &cfg.free_energy_params()).unwrap();
        assert_eq!(r.violations, 0, "{:?}", r.max_relative_increase);
    }
}
