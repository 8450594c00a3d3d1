//! One function per experiment. Each validates its inputs, runs entirely in
//! memory and returns the tables to write.

use ddcl_core::data::{
    generate_blobs, generate_corpus, generate_debris, kmeans_init_with, Corpus, LabeledDataset, TokenStream,
};
use ddcl_core::hierarchy::{init_hierarchy, train_hierarchy, HierarchyEpoch, LevelStats};
use ddcl_core::metrics::clustering_score;
use ddcl_core::numerics::{pca_fit, Matrix};
use ddcl_core::stability::ablation_sweep;
use ddcl_core::trainer::{train, Encoder, EpochLog, TrainerConfig, TrainerState};
use ddcl_core::vq::run_vq_comparison;
use ddcl_core::{Backend, LossReport};

use crate::config::{ablation_defaults, hierarchy_trainer_defaults, Experiment, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::gradcheck::{gradcheck_table, run_gradcheck, GRADCHECK_TOL};
use crate::output::{epoch_log_cells, epoch_log_table, float, opt_float, Summary, Table};

/// Test hooks that force a failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Feed the first logged epoch through the decomposition check with
    /// `V_alg` shifted below zero.
    Decomposition,
    /// Perturb an analytic gradient before the finite-difference comparison.
    Gradient,
}

pub struct RunContext {
    pub backend: Backend,
    pub fault: Option<Fault>,
}

pub fn run_experiment(config: &ExperimentConfig, ctx: &RunContext) -> CliResult<Vec<Table>> {
    match config.experiment {
        Experiment::Debris => debris(config, ctx),
        Experiment::Ablation => ablation(config, ctx),
        Experiment::Vq => vq(config, ctx),
        Experiment::Hierarchy => hierarchy(config, ctx),
        Experiment::Gradcheck => gradcheck(config, ctx).map(|t| vec![t]),
    }
}

fn audit_logs(logs: &[EpochLog], fault: Option<Fault>) -> CliResult<()> {
    for (i, l) in logs.iter().enumerate() {
        let shift = if i == 0 && fault == Some(Fault::Decomposition) { 1.0 } else { 0.0 };
        LossReport { l_q: l.l_q, l_ols: l.l_ols, l_soft: l.l_soft, v_soft: l.v_soft, v_alg: l.v_alg - shift }
            .check()
            .map_err(|e| CliError::Violation(format!("epoch {}: {e}", l.epoch)))?;
    }
    Ok(())
}

fn best_epoch(logs: &[EpochLog]) -> Option<&EpochLog> {
    logs.iter().filter(|l| l.acc.is_some()).fold(None, |best: Option<&EpochLog>, l| match best {
        Some(b) if b.acc >= l.acc => Some(b),
        _ => Some(l),
    })
}

fn summarise_run(s: &mut Summary, logs: &[EpochLog]) {
    s.int("epochs", logs.len());
    if let Some(b) = best_epoch(logs) {
        s.int("best_epoch", b.epoch);
        s.float("best_acc", b.acc.unwrap_or(f64::NAN));
        s.float("best_nmi", b.nmi.unwrap_or(f64::NAN));
        s.float("best_ari", b.ari.unwrap_or(f64::NAN));
    }
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        s.float("h_q_initial", first.h_q);
        s.float("h_q_final", last.h_q);
        s.float("s_p_initial", first.s_p);
        s.float("s_p_final", last.s_p);
        s.float("s_p_min", logs.iter().map(|l| l.s_p).fold(f64::INFINITY, f64::min));
        s.float("v_alg_min", logs.iter().map(|l| l.v_alg).fold(f64::INFINITY, f64::min));
    }
    s.int("decomposition_violations", 0);
}

fn kmeans_summary(s: &mut Summary, ds: &LabeledDataset, labels: &[usize]) -> CliResult<()> {
    let km = clustering_score(labels, &ds.y)?;
    s.float("kmeans_acc", km.acc);
    s.float("kmeans_nmi", km.nmi);
    s.float("kmeans_ari", km.ari);
    Ok(())
}

fn debris(config: &ExperimentConfig, ctx: &RunContext) -> CliResult<Vec<Table>> {
    let trainer = config.trainer_config(TrainerConfig::default(), ctx.backend)?;
    let (params, components, restarts) = config.debris_params();
    if restarts == 0 {
        return Err(CliError::config("debris.kmeans_restarts must be >= 1"));
    }
    let ds = generate_debris(&params, config.seed)?;
    let pca = pca_fit(&ds.x, components)?;
    let explained = pca.explained_variance_ratio;
    let z = pca.project(&ds.x)?;
    let fit = kmeans_init_with(ctx.backend, &z, ds.n_classes(), restarts, config.seed)?;
    let mut state = TrainerState::new(Encoder::FixedPca(pca), fit.bank.clone());
    let logs = train(&mut state, &ds.x, Some(&ds.y), &trainer)?;
    audit_logs(&logs, ctx.fault)?;

    let mut log_table = epoch_log_table(&[]);
    logs.iter().for_each(|l| log_table.push(epoch_log_cells(l)));
    let mut s = Summary::default();
    summarise_run(&mut s, &logs);
    kmeans_summary(&mut s, &ds, &fit.labels)?;
    s.float("pca_explained_variance", explained);
    s.int("pca_components", components);
    Ok(vec![log_table, s.into_table()])
}

fn ablation(config: &ExperimentConfig, ctx: &RunContext) -> CliResult<Vec<Table>> {
    let (_, base) = ablation_defaults();
    let trainer = config.trainer_config(base, ctx.backend)?;
    let (eps, fraction) = config.ablation_epsilons()?;
    let (params, restarts) = config.blob_params();
    if restarts == 0 {
        return Err(CliError::config("blobs.kmeans_restarts must be >= 1"));
    }
    let ds = generate_blobs(&params, config.seed)?;
    let fit = kmeans_init_with(ctx.backend, &ds.x, params.k, restarts, config.seed)?;
    let initial = TrainerState::new(Encoder::Linear(Matrix::identity(params.dim)), fit.bank.clone());
    let rows = ablation_sweep(&eps, &trainer, &initial, &ds.x, Some(&ds.y))?;

    let mut log_table = epoch_log_table(&["epsilon"]);
    let mut table = Table::new(
        "ablation.csv",
        &["epsilon", "best_acc", "final_S_P", "initial_S_P", "final_over_initial", "collapse_epoch"],
    );
    for r in &rows {
        audit_logs(&r.logs, ctx.fault)?;
        for l in &r.logs {
            let mut cells = epoch_log_cells(l);
            cells.push(float(r.epsilon));
            log_table.push(cells);
        }
        table.push(vec![
            float(r.epsilon),
            opt_float(r.best_acc),
            float(r.final_s_p),
            float(r.initial_s_p),
            float(r.final_s_p / r.initial_s_p),
            r.collapse_epoch(fraction).map(|e| e.to_string()).unwrap_or_default(),
        ]);
    }
    let mut s = Summary::default();
    kmeans_summary(&mut s, &ds, &fit.labels)?;
    s.float("collapse_fraction", fraction);
    s.float("eta_p", trainer.eta_p);
    Ok(vec![log_table, table, s.into_table()])
}

fn vq(config: &ExperimentConfig, ctx: &RunContext) -> CliResult<Vec<Table>> {
    let configs = config.vq_configs(ctx.backend)?;
    for c in &configs {
        TokenStream::new(c.tokens.clone(), c.seed)?;
    }
    let mut log_table = epoch_log_table(&[
        "k",
        "utilization_soft",
        "utilization_hard",
        "hard_unchanged_codes",
        "hard_dead_codes",
        "hard_loss",
        "soft_min_grad_norm",
    ]);
    let mut usage = Table::new("utilization.csv", &["k", "epoch", "arm", "code", "mean_assignment"]);
    let mut s = Summary::default();
    for c in &configs {
        let run = run_vq_comparison(c)?;
        let logs: Vec<EpochLog> = run.epochs.iter().map(|e| e.soft_log.clone()).collect();
        audit_logs(&logs, ctx.fault)?;
        for e in &run.epochs {
            let mut cells = epoch_log_cells(&e.soft_log);
            cells.extend([
                c.k.to_string(),
                float(e.soft.utilization),
                float(e.hard.utilization),
                e.hard_unchanged_codes.to_string(),
                e.hard_dead_codes.to_string(),
                float(e.hard_losses.total),
                float(e.soft_min_grad_norm),
            ]);
            log_table.push(cells);
            for (arm, rec) in [("soft", &e.soft), ("hard", &e.hard)] {
                for (code, u) in rec.usage.iter().enumerate() {
                    usage.push(vec![c.k.to_string(), rec.epoch.to_string(), arm.into(), code.to_string(), float(*u)]);
                }
            }
        }
        let first = &run.epochs[0];
        let last = run.epochs.last().expect("at least one epoch");
        s.float(format!("k{}_soft_utilization_epoch1", c.k), first.soft.utilization);
        s.float(format!("k{}_hard_utilization_epoch1", c.k), first.hard.utilization);
        s.float(format!("k{}_soft_utilization_final", c.k), last.soft.utilization);
        s.float(format!("k{}_hard_utilization_final", c.k), last.hard.utilization);
        let fmt = |e: Option<usize>| e.map(|v| v.to_string()).unwrap_or_else(|| "never".into());
        s.text(format!("k{}_soft_epochs_to_full", c.k), fmt(run.epochs_to_full(true)));
        s.text(format!("k{}_hard_epochs_to_full", c.k), fmt(run.epochs_to_full(false)));
        s.int(
            format!("k{}_hard_max_unchanged_codes", c.k),
            run.epochs.iter().map(|e| e.hard_unchanged_codes).max().unwrap_or(0),
        );
    }
    Ok(vec![log_table, usage, s.into_table()])
}

fn level_cells(l: &LevelStats) -> [String; 7] {
    let r = &l.report;
    [float(r.l_q), float(r.l_ols), float(r.l_soft), float(r.v_soft), float(r.v_alg), float(l.s_p), float(l.h_q)]
}

fn hierarchy_row(e: &HierarchyEpoch) -> Vec<String> {
    let (a, b) = (&e.audit.level1, &e.audit.level2);
    let sum = |f: fn(&LossReport) -> f64| float(f(&a.report) + f(&b.report));
    let mut row = vec![
        e.epoch.to_string(),
        float(e.t),
        float(e.audit.total_l_q),
        sum(|r| r.l_ols),
        sum(|r| r.l_soft),
        sum(|r| r.v_soft),
        sum(|r| r.v_alg),
        float(a.s_p.min(b.s_p)),
        float(b.h_q),
        float(e.score.acc),
        float(e.score.nmi),
        float(e.score.ari),
    ];
    row.extend(level_cells(a));
    row.extend(level_cells(b));
    row
}

fn hierarchy(config: &ExperimentConfig, ctx: &RunContext) -> CliResult<Vec<Table>> {
    let trainer = config.trainer_config(hierarchy_trainer_defaults(), ctx.backend)?;
    let cfg = config.hierarchy_config(&trainer)?;
    let corpus: Corpus = generate_corpus(&config.corpus_params(), config.seed)?;
    let mut model = init_hierarchy(&corpus, &cfg, trainer.schedule.t0, config.seed)?;
    let log = train_hierarchy(&corpus, &mut model, &cfg, &trainer)?;
    if ctx.fault == Some(Fault::Decomposition) {
        if let Some(first) = log.first() {
            let r = first.audit.level1.report;
            LossReport { v_alg: r.v_alg - 1.0, ..r }
                .check()
                .map_err(|e| CliError::Violation(format!("epoch 0, level 1: {e}")))?;
        }
    }
    let suffixed: Vec<String> = (1..=2)
        .flat_map(|lvl| {
            ["L_q", "L_OLS", "L_soft", "V_soft", "V_alg", "S_P", "H_Q"].map(move |c| format!("{c}_{lvl}"))
        })
        .collect();
    let extra: Vec<&str> = suffixed.iter().map(String::as_str).collect();
    let mut log_table = epoch_log_table(&extra);
    log.iter().for_each(|e| log_table.push(hierarchy_row(e)));

    let mut s = Summary::default();
    s.int("epochs", log.len());
    s.float("epsilon", trainer.epsilon());
    s.float("lambda", trainer.lambda);
    if let Some(last) = log.last() {
        s.float("level2_acc_final", last.score.acc);
        s.float("level2_nmi_final", last.score.nmi);
        s.float("level2_ari_final", last.score.ari);
    }
    let min = |f: fn(&HierarchyEpoch) -> f64| log.iter().map(f).fold(f64::INFINITY, f64::min);
    s.float("v_soft_1_min", min(|e| e.audit.level1.report.v_soft));
    s.float("v_soft_2_min", min(|e| e.audit.level2.report.v_soft));
    s.float("s_p_1_min", min(|e| e.audit.level1.s_p));
    s.float("s_p_2_min", min(|e| e.audit.level2.s_p));
    s.int("decomposition_violations", 0);
    Ok(vec![log_table, s.into_table()])
}

pub fn gradcheck(config: &ExperimentConfig, ctx: &RunContext) -> CliResult<Table> {
    let instances = config.gradcheck_instances()?;
    let entries = run_gradcheck(config.seed, instances, ctx.fault == Some(Fault::Gradient))?;
    for e in &entries {
        println!("{:<18} {:.3e}", e.name, e.max_rel_err);
    }
    let table = gradcheck_table(&entries);
    if let Some(bad) = entries.iter().find(|e| e.max_rel_err > GRADCHECK_TOL) {
        return Err(CliError::Violation(format!(
            "gradient {} has relative error {:e} > {GRADCHECK_TOL:e}",
            bad.name, bad.max_rel_err
        )));
    }
    Ok(table)
}
