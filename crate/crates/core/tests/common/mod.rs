//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use nalgebra::DMatrix;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum k-means inertia over every assignment of `points` to at most `k`
/// non-empty groups, by enumerating restricted growth strings.
pub fn exhaustive_kmeans_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    fn inertia(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let d = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for m in &members {
                for (a, v) in mean.iter_mut().zip(m.iter()) {
                    *a += v;
                }
            }
            mean.iter_mut().for_each(|a| *a /= members.len() as f64);
            total += members.iter().map(|m| sq_dist(m, &mean)).sum::<f64>();
        }
        total
    }
    fn go(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        if labels.len() == points.len() {
            *best = best.min(inertia(points, labels, k));
            return;
        }
        for l in 0..(used + 1).min(k) {
            labels.push(l);
            go(points, k, labels, used.max(l + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    go(points, k, &mut Vec::new(), 0, &mut best);
    best
}

/// Largest reduction of the sum of squared deviations over every
/// `(feature, midpoint)` candidate, with the rows sent left.
pub fn brute_force_split(rows: &[Vec<f64>], y: &[f64], min_leaf: usize) -> Option<(f64, Vec<usize>)> {
    let sse = |idx: &[usize]| {
        let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (y[i] - m) * (y[i] - m)).sum::<f64>()
    };
    let all: Vec<usize> = (0..rows.len()).collect();
    let parent = sse(&all);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for f in 0..rows[0].len() {
        let mut values: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (left, right): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| rows[i][f] <= t);
            if left.len() < min_leaf || right.len() < min_leaf {
                continue;
            }
            let gain = parent - sse(&left) - sse(&right);
            if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                best = Some((gain, left));
            }
        }
    }
    best
}

/// Adjusted Rand index of two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / c2(a.len() as u64);
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Eigenvalues (descending) of the explicitly formed sample covariance.
pub fn covariance_eigenvalues(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let mut values: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}
