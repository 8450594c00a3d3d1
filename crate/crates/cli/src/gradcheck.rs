//! Central finite-difference checks of every analytic gradient in the loss
//! module.

use ddcl_core::layer::{assign, soft_centroids};
use ddcl_core::loss::{
    competitive_loss, d_lq_d_t, free_energy, grad_embeddings, grad_encoder_signal, grad_free_energy_p,
    grad_prototypes, separation_force, variance_with_fixed_q, FreeEnergyParams,
};
use ddcl_core::numerics::{Matrix, SeededRng};
use ddcl_core::{AssignmentMatrix, PrototypeBank, Result};

use crate::output::{float, Table};

/// Entries above this fail the check.
pub const GRADCHECK_TOL: f64 = 1e-4;

const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub instances: usize,
}

fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let fp = f(&p)?;
        p[i] = x[i] - h;
        let fm = f(&p)?;
        p[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn random(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}

fn bank(k: usize, m: usize, v: &[f64]) -> Result<PrototypeBank> {
    PrototypeBank::new(Matrix::new(k, m, v.to_vec())?)
}

fn fixed_q_loss(z: &Matrix, b: &PrototypeBank, q: &AssignmentMatrix) -> f64 {
    let mut total = 0.0;
    for n in 0..z.rows() {
        for k in 0..b.k() {
            let d: f64 = z.row(n).iter().zip(b.prototype(k)).map(|(a, c)| (a - c).powi(2)).sum();
            total += q.row(n)[k] * d;
        }
    }
    total
}

/// Run every oracle on `instances` random small problems. With `corrupt`,
/// the analytic full prototype gradient is perturbed by 0.1% before
/// comparison.
pub fn run_gradcheck(seed: u64, instances: usize, corrupt: bool) -> Result<Vec<GradcheckEntry>> {
    let names = ["grad_p_full", "grad_p_sg", "grad_z_full", "separation_force", "encoder_signal", "free_energy_p", "dLq_dT"];
    let mut worst = [0.0f64; 7];
    let mut rng = SeededRng::new(seed);
    for _ in 0..instances {
        let n = 3 + (rng.uniform(0.0, 6.0) as usize);
        let k = 2 + (rng.uniform(0.0, 4.0) as usize);
        let m = 1 + (rng.uniform(0.0, 4.0) as usize);
        let t = rng.uniform(0.3, 3.0);
        let z = random(&mut rng, n, m);
        let b = PrototypeBank::new(random(&mut rng, k, m))?;
        let p = b.matrix().as_slice().to_vec();
        let q = assign(&z, &b, t)?;

        let mut full = grad_prototypes(&z, &b, t, false)?;
        if corrupt {
            full = full.scale(1.001);
        }
        let fd = central_diff(&p, STEP, |v| competitive_loss(&z, &bank(k, m, v)?, t))?;
        worst[0] = worst[0].max(rel_err(full.as_slice(), &fd));

        let sg = grad_prototypes(&z, &b, t, true)?;
        let fd = central_diff(&p, STEP, |v| Ok(fixed_q_loss(&z, &bank(k, m, v)?, &q) / n as f64))?;
        worst[1] = worst[1].max(rel_err(sg.as_slice(), &fd));

        let gz = grad_embeddings(&z, &b, t, false)?;
        let fd = central_diff(z.as_slice(), STEP, |v| competitive_loss(&Matrix::new(n, m, v.to_vec())?, &b, t))?;
        worst[2] = worst[2].max(rel_err(gz.as_slice(), &fd));

        let force = separation_force(&b, &q)?;
        let fd = central_diff(&p, STEP, |v| variance_with_fixed_q(&bank(k, m, v)?, &q))?;
        worst[3] = worst[3].max(rel_err(force.as_slice(), &fd));

        let signal = grad_encoder_signal(&z, &soft_centroids(&q, &b)?)?;
        let fd = central_diff(z.as_slice(), STEP, |v| Ok(fixed_q_loss(&Matrix::new(n, m, v.to_vec())?, &b, &q)))?;
        worst[4] = worst[4].max(rel_err(signal.as_slice(), &fd));

        let params = FreeEnergyParams::new(rng.uniform(0.1, 1.0));
        let g = grad_free_energy_p(&z, &b, t, &params)?;
        let fd = central_diff(&p, STEP, |v| free_energy(&z, &bank(k, m, v)?, t, &params))?;
        worst[5] = worst[5].max(rel_err(g.as_slice(), &fd));

        let analytic = d_lq_d_t(&z, &b, t)?;
        let fd = central_diff(&[t], 1e-5, |v| competitive_loss(&z, &b, v[0]))?;
        worst[6] = worst[6].max(rel_err(&[analytic], &fd));
    }
    let mut out: Vec<GradcheckEntry> =
        names.iter().zip(worst).map(|(&name, e)| GradcheckEntry { name, max_rel_err: e, instances }).collect();

    // one prototype: the gradient is (2/N) Σ_n (p − z_n) in closed form
    let z = random(&mut rng, 5, 3);
    let single = PrototypeBank::new(random(&mut rng, 1, 3))?;
    let g = grad_prototypes(&z, &single, 1.0, false)?;
    let closed: Vec<f64> = (0..3)
        .map(|j| 2.0 * (0..5).map(|i| single.prototype(0)[j] - z.row(i)[j]).sum::<f64>() / 5.0)
        .collect();
    out.push(GradcheckEntry { name: "k1_closed_form", max_rel_err: rel_err(g.as_slice(), &closed), instances: 1 });
    Ok(out)
}

pub fn gradcheck_table(entries: &[GradcheckEntry]) -> Table {
    let mut t = Table::new("gradcheck.csv", &["gradient", "max_rel_err", "instances", "pass"]);
    for e in entries {
        t.push(vec![
            e.name.to_string(),
            float(e.max_rel_err),
            e.instances.to_string(),
            (e.max_rel_err <= GRADCHECK_TOL).to_string(),
        ]);
    }
    t
}
