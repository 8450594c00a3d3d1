use std::cmp::Ordering;

use crate::error::{DdclError, Result};
use crate::exec::{self, Backend};
use crate::layer::PrototypeBank;
use crate::numerics::{sq_dist, Matrix, SeededRng};

const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub bank: PrototypeBank,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Final inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
    pub best_restart: usize,
}

pub fn kmeans_init(z: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    kmeans_init_with(Backend::default(), z, k, restarts, seed)
}

/// Lloyd's algorithm from k-means++ seeds, keeping the restart with the lowest
/// inertia (earliest restart on ties). Restarts use independent streams split
/// from `seed`, so the result does not depend on the backend.
pub fn kmeans_init_with(
    backend: Backend,
    z: &Matrix,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(DdclError::invalid("k", "must be at least 1"));
    }
    if restarts == 0 {
        return Err(DdclError::invalid("restarts", "must be at least 1"));
    }
    if z.rows() == 0 {
        return Err(DdclError::EmptyInput("kmeans input"));
    }
    if !z.is_finite() {
        return Err(DdclError::NonFinite("kmeans input"));
    }
    let distinct = count_distinct_rows(z);
    if distinct < k {
        return Err(DdclError::TooFewDistinct { distinct, k });
    }

    let root = SeededRng::new(seed);
    let runs = exec::map_indices(backend, restarts, |r| {
        let mut rng = root.split(r as u64);
        lloyd(z, seeds_plus_plus(z, k, &mut rng))
    });

    let restart_inertias: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.2 < runs[best].2 {
            best = i;
        }
    }
    let (centers, labels, inertia) = runs.into_iter().nth(best).expect("restarts >= 1");
    Ok(KMeansFit {
        bank: PrototypeBank::new(centers)?,
        labels,
        inertia,
        restart_inertias,
        best_restart: best,
    })
}

fn count_distinct_rows(z: &Matrix) -> usize {
    let mut rows: Vec<&[f64]> = z.row_iter().collect();
    let cmp = |a: &&[f64], b: &&[f64]| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    };
    rows.sort_by(cmp);
    rows.dedup_by(|a, b| cmp(a, b) == Ordering::Equal);
    rows.len()
}

fn seeds_plus_plus(z: &Matrix, k: usize, rng: &mut SeededRng) -> Matrix {
    let n = z.rows();
    let mut chosen = vec![rng.index(n)];
    let mut nearest: Vec<f64> = z.row_iter().map(|r| sq_dist(r, z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let target = rng.uniform(0.0, total);
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in nearest.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let next = pick.expect("distinct points remain while fewer than k seeds are chosen");
        chosen.push(next);
        for (i, r) in z.row_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, z.row(next)));
        }
    }
    z.select_rows(&chosen)
}

fn nearest_center(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.row_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn lloyd(z: &Matrix, mut centers: Matrix) -> (Matrix, Vec<usize>, f64) {
    let (n, m) = z.shape();
    let k = centers.rows();
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, x) in z.row_iter().enumerate() {
            let (c, d) = nearest_center(x, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, x) in z.row_iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // Reseed an empty cluster at the worst-served point.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |b, i| match b {
                        Some(j) if dists[j] >= dists[i] => Some(j),
                        _ => Some(i),
                    })
                    .expect("n >= k");
                taken[far] = true;
                centers.row_mut(c).copy_from_slice(z.row(far));
                dists[far] = 0.0;
            }
        }
    }
    let mut inertia = 0.0;
    for (i, x) in z.row_iter().enumerate() {
        let (c, d) = nearest_center(x, &centers);
        labels[i] = c;
        inertia += d;
    }
    (centers, labels, inertia)
}
