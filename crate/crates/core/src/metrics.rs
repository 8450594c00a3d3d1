//! Clustering evaluation and training diagnostics.

use std::collections::BTreeMap;

use crate::error::{DdclError, Result};
use crate::layer::{AssignmentMatrix, PrototypeBank};
use crate::numerics::sq_dist;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringScore {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    /// `(predicted label, true label)` pairs of the optimal matching.
    pub matching: Vec<(usize, usize)>,
}

struct Contingency {
    pred_labels: Vec<usize>,
    true_labels: Vec<usize>,
    counts: Vec<Vec<usize>>,
    n: usize,
}

fn dense_index(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    // re-number in sorted label order for stable output
    let sorted: Vec<usize> = map.keys().copied().collect();
    let idx: BTreeMap<usize, usize> = sorted.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    (sorted, labels.iter().map(|l| idx[l]).collect())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<Contingency> {
    if pred.is_empty() {
        return Err(DdclError::EmptyInput("clustering labels"));
    }
    if pred.len() != truth.len() {
        return Err(DdclError::DimensionMismatch {
            context: "clustering labels",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let (pred_labels, p) = dense_index(pred);
    let (true_labels, t) = dense_index(truth);
    let mut counts = vec![vec![0usize; true_labels.len()]; pred_labels.len()];
    for (&a, &b) in p.iter().zip(&t) {
        counts[a][b] += 1;
    }
    Ok(Contingency {
        pred_labels,
        true_labels,
        counts,
        n: pred.len(),
    })
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn–Munkres with
/// potentials, `O(n³)`). Returns `assignment[row] = col`.
pub fn hungarian_min_cost(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn accuracy_from(c: &Contingency) -> (f64, Vec<(usize, usize)>) {
    let size = c.pred_labels.len().max(c.true_labels.len());
    // zero-padded square profit matrix, negated into a cost
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| {
                    let count = c.counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
                    -(count as f64)
                })
                .collect()
        })
        .collect();
    let assignment = hungarian_min_cost(&cost);
    let mut hits = 0;
    let mut matching = Vec::new();
    for (i, &j) in assignment.iter().enumerate() {
        if i < c.pred_labels.len() && j < c.true_labels.len() {
            hits += c.counts[i][j];
            matching.push((c.pred_labels[i], c.true_labels[j]));
        }
    }
    (hits as f64 / c.n as f64, matching)
}

/// Clustering accuracy under the best one-to-one relabelling of `pred`.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize]) -> Result<(f64, Vec<(usize, usize)>)> {
    Ok(accuracy_from(&contingency(pred, truth)?))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn nmi_from(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let row_sums: Vec<usize> = c.counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..c.true_labels.len())
        .map(|j| c.counts.iter().map(|r| r[j]).sum())
        .collect();
    let h_pred = entropy(row_sums.iter().copied(), n);
    let h_true = entropy(col_sums.iter().copied(), n);
    if h_pred <= 0.0 || h_true <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (n * nij / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
        }
    }
    (mi / (h_pred * h_true).sqrt()).clamp(0.0, 1.0)
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

fn ari_from(c: &Contingency) -> f64 {
    let index: f64 = c.counts.iter().flatten().map(|&v| comb2(v)).sum();
    let a: f64 = c.counts.iter().map(|r| comb2(r.iter().sum())).sum();
    let b: f64 = (0..c.true_labels.len())
        .map(|j| comb2(c.counts.iter().map(|r| r[j]).sum()))
        .sum();
    let total = comb2(c.n);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let max = 0.5 * (a + b);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Normalised mutual information, geometric-mean normalisation, natural log.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(nmi_from(&contingency(pred, truth)?))
}

/// Adjusted Rand index via pair counting.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(ari_from(&contingency(pred, truth)?))
}

pub fn clustering_score(pred: &[usize], truth: &[usize]) -> Result<ClusteringScore> {
    let c = contingency(pred, truth)?;
    let (acc, matching) = accuracy_from(&c);
    Ok(ClusteringScore {
        acc,
        nmi: nmi_from(&c),
        ari: ari_from(&c),
        matching,
    })
}

/// `S(P) = min_{j≠k} ‖p_j − p_k‖²`.
pub fn prototype_separation(bank: &PrototypeBank) -> Result<f64> {
    let k = bank.k();
    if k < 2 {
        return Err(DdclError::invalid("K", "separation needs at least two prototypes"));
    }
    let mut best = f64::INFINITY;
    for j in 0..k {
        for l in (j + 1)..k {
            best = best.min(sq_dist(bank.prototype(j), bank.prototype(l)));
        }
    }
    Ok(best)
}

/// `H(Q) = −(1/N) Σ_n Σ_k q_nk ln q_nk`, with `0 ln 0 = 0`.
pub fn assignment_entropy(q: &AssignmentMatrix) -> f64 {
    let n = q.n().max(1) as f64;
    let total: f64 = q
        .matrix()
        .as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use approx::assert_relative_eq;

    #[test]
    fn accuracy_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(hungarian_accuracy(&truth, &truth).unwrap().0, 1.0);
        let permuted = [2, 2, 0, 0, 1, 1];
        let (acc, matching) = hungarian_accuracy(&permuted, &truth).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(matching, vec![(0, 1), (1, 2), (2, 0)]);
        // exhaustive over both 2x2 matchings: identity scores 1 hit, swap scores 3
        let (pred, truth) = ([0, 0, 1, 1], [0, 1, 0, 0]);
        let hits = |map: [usize; 2]| pred.iter().zip(&truth).filter(|(p, t)| map[**p] == **t).count();
        let best = hits([0, 1]).max(hits([1, 0])) as f64 / 4.0;
        let (acc, _) = hungarian_accuracy(&pred, &truth).unwrap();
        assert_eq!(acc, best);
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn unequal_cluster_counts_are_padded() {
        let (acc, matching) = hungarian_accuracy(&[0, 0, 0, 1, 1, 2], &[5, 5, 5, 7, 7, 7]).unwrap();
        assert_relative_eq!(acc, 5.0 / 6.0);
        assert_eq!(matching.len(), 2);
    }

    #[test]
    fn label_errors() {
        assert!(hungarian_accuracy(&[], &[]).is_err());
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn nmi_ari_identical_partitions() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert_relative_eq!(nmi(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(ari(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
    }

    /// Exhaustive enumeration of the 6 pairs of a 4-point partition.
    #[test]
    fn ari_matches_pair_count_oracle() {
        let pred = [0, 0, 1, 1];
        let truth = [0, 0, 0, 1];
        let (mut both, mut only_p, mut only_t, mut none) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..4 {
            for j in (i + 1)..4 {
                match (pred[i] == pred[j], truth[i] == truth[j]) {
                    (true, true) => both += 1.0,
                    (true, false) => only_p += 1.0,
                    (false, true) => only_t += 1.0,
                    (false, false) => none += 1.0,
                }
            }
        }
        let total: f64 = both + only_p + only_t + none;
        assert_eq!(total, 6.0);
        let (a, b) = (both + only_p, both + only_t);
        let expected = a * b / total;
        let want = (both - expected) / (0.5 * (a + b) - expected);
        assert_relative_eq!(ari(&pred, &truth).unwrap(), want, epsilon = 1e-14);
        assert_relative_eq!(want, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn separation_examples() {
        let bank = PrototypeBank::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(prototype_separation(&bank).unwrap(), 25.0);
        let bank = PrototypeBank::from_rows(&[[1.0, 1.0], [5.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(prototype_separation(&bank).unwrap(), 0.0);
        let single = PrototypeBank::from_rows(&[[1.0, 1.0]]).unwrap();
        assert!(prototype_separation(&single).is_err());
    }

    #[test]
    fn entropy_examples() {
        let k = 5;
        let uniform = AssignmentMatrix::new(Matrix::filled(3, k, 1.0 / k as f64)).unwrap();
        assert_relative_eq!(assignment_entropy(&uniform), (k as f64).ln(), epsilon = 1e-14);
        let hard = AssignmentMatrix::new(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(assignment_entropy(&hard), 0.0);
        let q = AssignmentMatrix::new(Matrix::from_rows(&[[0.25, 0.75]]).unwrap()).unwrap();
        let want = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert_relative_eq!(assignment_entropy(&q), want, epsilon = 1e-15);
        assert_relative_eq!(want, 0.5623, epsilon = 1e-4);
    }
}
