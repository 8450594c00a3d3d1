//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (straight to stdout, so it shows even when output is captured) and then
//! asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use ddcl_core::data::{
    generate_blobs, generate_corpus, generate_debris, kmeans_init, BlobParams, CorpusParams, DebrisParams,
};
use ddcl_core::hierarchy::{decoupling_check, init_hierarchy, train_hierarchy, HierarchyConfig};
use ddcl_core::layer::{assign, soft_centroids};
use ddcl_core::loss::{
    competitive_loss, d_lq_d_t, decompose_unchecked, free_energy, grad_encoder_signal, grad_free_energy_p,
    grad_prototypes, separation_force, variance_with_fixed_q, FreeEnergyParams, IDENTITY_TOL,
};
use ddcl_core::metrics::{assignment_entropy, clustering_score, hungarian_accuracy, prototype_separation};
use ddcl_core::numerics::{pca_fit, Matrix, SeededRng};
use ddcl_core::stability::{
    ablation_sweep, assemble_jacobian, descend_to_stationary, estimate_hessian_blocks, lyapunov_audit,
    record_trajectory, stability_verdict, toy_system, HessianBlocks, ToySystemParams,
};
use ddcl_core::trainer::{train, AnnealSchedule, Encoder, TrainerConfig, TrainerState};
use ddcl_core::vq::{run_vq_comparison, VqConfig};
use ddcl_core::{AssignmentMatrix, PrototypeBank};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestError, TestRunner};

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, budget_s: f64) -> bool {
    let in_time = elapsed.as_secs_f64() < budget_s;
    let ok = pass && in_time;
    let line = format!(
        "criterion {id} [{name}]: {} ({detail}; {:.2}s of {budget_s}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    ok
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn random_bank(rng: &mut SeededRng, k: usize, m: usize) -> PrototypeBank {
    PrototypeBank::new(random_matrix(rng, k, m, 1.0)).unwrap()
}

fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn bank_from(k: usize, m: usize, v: &[f64]) -> PrototypeBank {
    PrototypeBank::new(Matrix::new(k, m, v.to_vec()).unwrap()).unwrap()
}

/// `Σ_n Σ_k q_nk ‖z_n − p_k‖²` with `q` frozen.
fn fixed_q_loss(z: &Matrix, bank: &PrototypeBank, q: &AssignmentMatrix) -> f64 {
    (0..z.rows())
        .map(|n| {
            (0..bank.k())
                .map(|k| {
                    let d: f64 = z.row(n).iter().zip(bank.prototype(k)).map(|(a, b)| (a - b).powi(2)).sum();
                    q.row(n)[k] * d
                })
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn criterion_1_exact_decomposition() {
    let start = Instant::now();
    let mut rng = SeededRng::new(1);
    let mut worst_residual: f64 = 0.0;
    let mut worst_v_alg = f64::INFINITY;
    for _ in 0..1000 {
        let n = 1 + (rng.uniform(0.0, 64.0) as usize).min(63);
        let k = 1 + (rng.uniform(0.0, 32.0) as usize).min(31);
        let m = 1 + (rng.uniform(0.0, 16.0) as usize).min(15);
        let t = rng.uniform(-3.0, 2.0).exp();
        let scale = rng.uniform(-1.0, 1.0).exp();
        let z = random_matrix(&mut rng, n, m, scale);
        let bank = random_bank(&mut rng, k, m);
        let r = decompose_unchecked(&z, &bank, t).unwrap();
        worst_residual = worst_residual.max(r.identity_residual());
        worst_v_alg = worst_v_alg.min(r.v_alg);
    }

    // every epoch of a training run is audited by the trainer itself; re-check the logs
    let ds = generate_blobs(&BlobParams { separation: 2.0, ..BlobParams::new(5, 40, 8, 0.5) }, 3).unwrap();
    let fit = kmeans_init(&ds.x, 5, 4, 3).unwrap();
    let mut state = TrainerState::new(Encoder::Linear(Matrix::identity(8)), fit.bank);
    let config = TrainerConfig { epochs: 100, eta_theta: 0.01, lambda: 0.1, ..Default::default() };
    let logs = train(&mut state, &ds.x, Some(&ds.y), &config).unwrap();
    for l in &logs {
        worst_residual = worst_residual.max((l.l_q - l.l_soft - l.v_soft).abs());
        worst_v_alg = worst_v_alg.min(l.v_alg);
    }

    let pass = worst_residual <= IDENTITY_TOL && worst_v_alg >= -1e-8;
    let detail = format!("max |L_q - L_soft - V_soft| = {worst_residual:.2e}, min V_alg = {worst_v_alg:.2e}");
    assert!(report(1, "exact decomposition", pass, &detail, start.elapsed(), 10.0));
}

#[test]
fn criterion_2_gradient_oracles() {
    let start = Instant::now();
    let mut rng = SeededRng::new(2);
    let h = 1e-6;
    let mut worst = [0.0f64; 6];
    for _ in 0..20 {
        let n = 3 + (rng.uniform(0.0, 6.0) as usize);
        let k = 2 + (rng.uniform(0.0, 4.0) as usize);
        let m = 1 + (rng.uniform(0.0, 4.0) as usize);
        let t = rng.uniform(0.3, 3.0);
        let z = random_matrix(&mut rng, n, m, 1.0);
        let bank = random_bank(&mut rng, k, m);
        let p = bank.matrix().as_slice().to_vec();
        let q = assign(&z, &bank, t).unwrap();

        let full = grad_prototypes(&z, &bank, t, false).unwrap();
        let fd = central_diff(&p, h, |v| competitive_loss(&z, &bank_from(k, m, v), t).unwrap());
        worst[0] = worst[0].max(rel_err(full.as_slice(), &fd));

        let sg = grad_prototypes(&z, &bank, t, true).unwrap();
        let fd = central_diff(&p, h, |v| fixed_q_loss(&z, &bank_from(k, m, v), &q) / n as f64);
        worst[1] = worst[1].max(rel_err(sg.as_slice(), &fd));

        let force = separation_force(&bank, &q).unwrap();
        let fd = central_diff(&p, h, |v| variance_with_fixed_q(&bank_from(k, m, v), &q).unwrap());
        worst[2] = worst[2].max(rel_err(force.as_slice(), &fd));

        let signal = grad_encoder_signal(&z, &soft_centroids(&q, &bank).unwrap()).unwrap();
        let fd = central_diff(z.as_slice(), h, |v| fixed_q_loss(&Matrix::new(n, m, v.to_vec()).unwrap(), &bank, &q));
        worst[3] = worst[3].max(rel_err(signal.as_slice(), &fd));

        let params = FreeEnergyParams::new(rng.uniform(0.1, 1.0));
        let g = grad_free_energy_p(&z, &bank, t, &params).unwrap();
        let fd = central_diff(&p, h, |v| free_energy(&z, &bank_from(k, m, v), t, &params).unwrap());
        worst[4] = worst[4].max(rel_err(g.as_slice(), &fd));

        let analytic = d_lq_d_t(&z, &bank, t).unwrap();
        let fd = central_diff(&[t], 1e-5, |v| competitive_loss(&z, &bank, v[0]).unwrap());
        worst[5] = worst[5].max(rel_err(&[analytic], &fd));
    }
    let pass = worst[..5].iter().all(|&e| e < 1e-5) && worst[5] < 1e-4;
    let detail = format!(
        "max rel err: full {:.1e}, sg {:.1e}, separation {:.1e}, encoder {:.1e}, free energy {:.1e}, dL/dT {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
    );
    assert!(report(2, "gradient oracles", pass, &detail, start.elapsed(), 30.0));
}

#[test]
fn criterion_3_debris() {
    let start = Instant::now();
    let ds = generate_debris(&DebrisParams::default(), 42).unwrap();
    let k = ds.n_classes();
    let pca = pca_fit(&ds.x, 5).unwrap();
    let z = pca.project(&ds.x).unwrap();
    let fit = kmeans_init(&z, k, 10, 42).unwrap();
    let km = clustering_score(&fit.labels, &ds.y).unwrap();
    let mut state = TrainerState::new(Encoder::FixedPca(pca), fit.bank);
    let config = TrainerConfig::default();
    let logs = train(&mut state, &ds.x, Some(&ds.y), &config).unwrap();

    let violations = logs
        .iter()
        .filter(|l| l.v_alg < -1e-8 || l.v_soft < 0.0 || (l.l_q - l.l_soft - l.v_soft).abs() > IDENTITY_TOL)
        .count();
    let s_positive = logs.iter().all(|l| l.s_p > 0.0);
    let (h0, h_end) = (logs[0].h_q, logs.last().unwrap().h_q);
    let best = logs.iter().filter_map(|l| l.acc).fold(0.0, f64::max);
    let pass = logs.len() == 500 && violations == 0 && s_positive && h_end < h0 && best >= km.acc - 0.01;
    let detail = format!(
        "violations {violations}, S(P)>0 all epochs {s_positive}, H(Q) {h0:.3} -> {h_end:.3}, best ACC {best:.4} vs k-means {:.4}",
        km.acc
    );
    assert!(report(3, "debris experiment", pass, &detail, start.elapsed(), 120.0));
}

#[test]
fn criterion_4_epsilon_ablation() {
    let start = Instant::now();
    let ds = generate_blobs(&BlobParams { separation: 2.0, ..BlobParams::new(10, 100, 32, 0.05) }, 42).unwrap();
    let fit = kmeans_init(&ds.x, 10, 10, 42).unwrap();
    let initial = TrainerState::new(Encoder::Linear(Matrix::identity(32)), fit.bank);
    let base = TrainerConfig {
        eta_p: 0.5,
        epochs: 300,
        schedule: AnnealSchedule { t0: 4.0, t_min: 0.1, tau: 5.0 },
        ..Default::default()
    };
    let rows = ablation_sweep(&[0.001, 0.01, 0.1, 0.5, 1.0], &base, &initial, &ds.x, Some(&ds.y)).unwrap();
    let at = |e: f64| rows.iter().find(|r| r.epsilon == e).unwrap();
    let (r01, r1) = (at(0.1), at(1.0));
    let ratio_ok = r01.final_s_p >= 10.0 * r1.final_s_p;
    let collapse = r1.collapse_epoch(0.01);
    let collapse_ok = collapse.is_some_and(|e| e <= 50);
    let stable_acc = rows.iter().filter(|r| r.epsilon <= 0.1).filter_map(|r| r.best_acc).fold(0.0, f64::max);
    let acc_ok = stable_acc >= r1.best_acc.unwrap();
    let pass = ratio_ok && collapse_ok && acc_ok;
    let fractions: Vec<String> =
        rows.iter().map(|r| format!("{}:{:.2e}", r.epsilon, r.final_s_p / r.initial_s_p)).collect();
    let detail = format!(
        "final S/S0 [{}], eps=1 below 1% at epoch {collapse:?}, best ACC eps<=0.1 {stable_acc:.3} vs eps=1 {:.3}",
        fractions.join(" "),
        r1.best_acc.unwrap()
    );
    assert!(report(4, "epsilon ablation", pass, &detail, start.elapsed(), 300.0));
}

#[test]
fn criterion_5_vq_utilization() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for k in [16, 64] {
        let run = run_vq_comparison(&VqConfig { k, ..Default::default() }).unwrap();
        let first = &run.epochs[0];
        let dead = run.epochs.iter().map(|e| e.hard_unchanged_codes).max().unwrap_or(0);
        pass &= first.soft.utilization == 1.0;
        if k == 64 {
            pass &= first.hard.utilization <= 0.9 && dead >= 1;
        }
        details.push(format!(
            "K={k}: soft {:.3}, hard {:.3} at epoch 1, max frozen codes {dead}",
            first.soft.utilization, first.hard.utilization
        ));
    }
    assert!(report(5, "vq utilization", pass, &details.join("; "), start.elapsed(), 60.0));
}

#[test]
fn criterion_6_hierarchy_audit() {
    let start = Instant::now();
    let corpus = generate_corpus(&CorpusParams::default(), 42).unwrap();
    let cfg = HierarchyConfig::default();
    let mut pass = true;
    let mut details = Vec::new();
    for (eps, lambda) in [(0.1, 0.5), (0.05, 1.5)] {
        let trainer = TrainerConfig { epochs: 15, lambda, ..Default::default() }.with_epsilon(eps);
        let mut model = init_hierarchy(&corpus, &cfg, trainer.schedule.t0, 42).unwrap();
        let log = train_hierarchy(&corpus, &mut model, &cfg, &trainer).unwrap();
        let nonneg = log.iter().all(|e| e.audit.level1.report.v_soft >= 0.0 && e.audit.level2.report.v_soft >= 0.0);
        let additive = log
            .iter()
            .all(|e| e.audit.total_l_q == e.audit.level1.report.l_q + e.audit.level2.report.l_q);
        let s1_positive = log.iter().all(|e| e.audit.level1.s_p > 0.0);
        let other = PrototypeBank::new(model.bank2.matrix().scale(-1.3)).unwrap();
        let t = trainer.schedule.temperature(15);
        let dec = decoupling_check(&corpus.docs[..50], &model, &other, t, t).unwrap();
        pass &= log.len() == 15 && nonneg && additive && s1_positive && dec.max_dv1_dp2 == 0.0 && dec.force_unchanged;
        details.push(format!(
            "eps={eps} lambda={lambda}: V>=0 {nonneg}, additive {additive}, S1>0 {s1_positive}, dV1/dP2 {:.1e}",
            dec.max_dv1_dp2
        ));
    }
    assert!(report(6, "hierarchy audit", pass, &details.join("; "), start.elapsed(), 120.0));
}

#[test]
fn criterion_7_lyapunov_audit() {
    let start = Instant::now();
    let ds = generate_blobs(&BlobParams { separation: 2.0, ..BlobParams::new(5, 40, 8, 0.6) }, 7).unwrap();
    let fit = kmeans_init(&ds.x, 5, 4, 7).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for (name, schedule) in [("fixed T", AnnealSchedule::constant(1.0)), ("annealed", AnnealSchedule::default())] {
        let config = TrainerConfig { eta_p: 1e-3, epochs: 300, schedule, ..Default::default() };
        let mut state = TrainerState::new(Encoder::Identity, fit.bank.clone());
        let (_, snaps) = record_trajectory(&mut state, &ds.x, &config).unwrap();
        let audit = lyapunov_audit(&snaps, &config.free_energy_params()).unwrap();
        pass &= audit.violations == 0 && audit.deltas.len() == 300;
        details.push(format!(
            "{name}: {} violations, max relative increase {:.2e}",
            audit.violations, audit.max_relative_increase
        ));
    }
    assert!(report(7, "lyapunov audit", pass, &details.join("; "), start.elapsed(), 60.0));
}

fn random_pd_block_system(rng: &mut SeededRng, nt: usize, np: usize) -> HessianBlocks {
    let pd = |rng: &mut SeededRng, n: usize| {
        let a = random_matrix(rng, n, n, 1.0);
        let mut s = a.matmul(&a.transpose()).unwrap();
        for i in 0..n {
            s[(i, i)] += 0.1;
        }
        s
    };
    let (tt, pp) = (pd(rng, nt), pd(rng, np));
    let coupling = rng.uniform(0.0, 3.0);
    let tp = random_matrix(rng, nt, np, coupling);
    let n = nt + np;
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = match (i < nt, j < nt) {
                (true, true) => tt[(i, j)],
                (false, false) => pp[(i - nt, j - nt)],
                (true, false) => tp[(i, j - nt)],
                (false, true) => tp[(j, i - nt)],
            };
        }
    }
    HessianBlocks::from_full(&h, nt).unwrap()
}

#[test]
fn criterion_8_jacobian_stability() {
    let start = Instant::now();
    let (eta_p, eps) = (0.5, 0.01);
    let mut pass = true;
    let mut details = Vec::new();
    for (k, d, seed) in [(2, 2, 1), (2, 3, 2), (3, 2, 3), (3, 3, 1)] {
        let sys = toy_system(&ToySystemParams { k, input_dim: d, ..Default::default() }, seed).unwrap();
        let (fit, _) = descend_to_stationary(&sys, eps * eta_p, eta_p, 1e-3, 2_000_000).unwrap();
        let residual = fit.gradient_norm().unwrap();
        let blocks = estimate_hessian_blocks(&fit).unwrap();
        let j = assemble_jacobian(&blocks, eps * eta_p, eta_p);
        let v = stability_verdict(&j, &blocks, eps * eta_p, eta_p).unwrap();
        pass &= fit.n_params() <= 60 && residual < 1e-3 && v.stable && v.sufficient_bound.is_some();
        details.push(format!(
            "K={k} d={d}: {} params, |grad| {residual:.1e}, min Re {:.2e}, bound {:.3e}",
            fit.n_params(),
            v.min_real_part,
            v.sufficient_bound.unwrap_or(f64::NAN)
        ));
    }

    let mut rng = SeededRng::new(8);
    let (mut contradictions, mut pd_count, mut stable_count) = (0, 0, 0);
    for _ in 0..20 {
        let nt = 1 + (rng.uniform(0.0, 4.0) as usize);
        let np = 1 + (rng.uniform(0.0, 4.0) as usize);
        let blocks = random_pd_block_system(&mut rng, nt, np);
        let (et, ep) = (rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0));
        let j = assemble_jacobian(&blocks, et, ep);
        let v = stability_verdict(&j, &blocks, et, ep).unwrap();
        pd_count += v.symmetric_part_pd as usize;
        stable_count += v.stable as usize;
        if v.symmetric_part_pd && !v.stable {
            contradictions += 1;
        }
    }
    pass &= contradictions == 0;
    details.push(format!("PD check: {pd_count}/20 PD, {stable_count}/20 stable, {contradictions} contradictions"));
    assert!(report(8, "jacobian stability", pass, &details.join("; "), start.elapsed(), 60.0));
}

fn brute_separation(bank: &PrototypeBank) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..bank.k() {
        for j in 0..bank.k() {
            if i != j {
                let d: f64 = bank.prototype(i).iter().zip(bank.prototype(j)).map(|(a, b)| (a - b).powi(2)).sum();
                best = best.min(d);
            }
        }
    }
    best
}

fn record<T: std::fmt::Debug>(failures: &mut Vec<String>, name: &str, result: Result<(), TestError<T>>) {
    if let Err(e) = result {
        failures.push(format!("{name}: {e}"));
    }
}

#[test]
fn criterion_9_property_suites() {
    let start = Instant::now();
    let cases = 200;
    let mut failures = Vec::new();

    let mut runner = TestRunner::new(Config::with_cases(cases));
    record(
        &mut failures,
        "ACC permutation invariance",
        runner.run(
            &(prop::collection::vec((0usize..5, 0usize..5), 2..60), Just((0..5).collect::<Vec<usize>>()).prop_shuffle()),
            |(pairs, perm)| {
                let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
                let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
                let (a, _) = hungarian_accuracy(&pred, &truth).unwrap();
                let (b, _) = hungarian_accuracy(&relabeled, &truth).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
                Ok(())
            },
        ),
    );

    let mut runner = TestRunner::new(Config::with_cases(cases));
    record(
        &mut failures,
        "entropy bounds and softmax rows",
        runner.run(&(1usize..20, 1usize..10, 1usize..6, 0.01f64..10.0, any::<u64>()), |(n, k, m, t, seed)| {
            let mut rng = SeededRng::new(seed);
            let z = random_matrix(&mut rng, n, m, 2.0);
            let bank = random_bank(&mut rng, k, m);
            let q = assign(&z, &bank, t).unwrap();
            for i in 0..n {
                let s: f64 = q.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(q.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let h = assignment_entropy(&q);
            prop_assert!(h >= -1e-12 && h <= (k as f64).ln() + 1e-12);
            Ok(())
        }),
    );

    let mut runner = TestRunner::new(Config::with_cases(cases));
    record(
        &mut failures,
        "k-means restart optimality",
        runner.run(&(2usize..5, 1usize..4, 1usize..5, any::<u64>()), |(k, m, restarts, seed)| {
            let mut rng = SeededRng::new(seed);
            let z = random_matrix(&mut rng, 12 + 3 * k, m, 1.0);
            let fit = kmeans_init(&z, k, restarts, seed).unwrap();
            let best = fit.restart_inertias.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(fit.restart_inertias.len(), restarts);
            prop_assert_eq!(fit.inertia, best);
            prop_assert_eq!(fit.restart_inertias[fit.best_restart], best);
            Ok(())
        }),
    );

    let mut runner = TestRunner::new(Config::with_cases(cases));
    record(
        &mut failures,
        "S(P) brute force",
        runner.run(&(2usize..12, 1usize..6, any::<u64>()), |(k, m, seed)| {
            let mut rng = SeededRng::new(seed);
            let bank = random_bank(&mut rng, k, m);
            prop_assert_eq!(prototype_separation(&bank).unwrap(), brute_separation(&bank));
            Ok(())
        }),
    );

    let pass = failures.is_empty();
    let detail = if pass { format!("4 suites x {cases} cases") } else { failures.join("; ") };
    assert!(report(9, "property suites", pass, &detail, start.elapsed(), 30.0));
}
