//! Pseudo-domain discovery: k-means over style embeddings.
//!
//! Each restart seeds with k-means++ from its own derived stream
//! (`stream_id = restart index`) and runs Lloyd iterations until the
//! assignment stops changing or `max_iter` is reached. The restart with the
//! lowest final inertia wins (earliest restart on ties), so parallel and
//! serial execution agree.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numcore::{rng_derive, tns, SeededRng};
use crate::styleembed::StyleEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 5,
            max_iter: 100,
            restarts: 10,
        }
    }
}

/// Fitted k-means model. Pseudo-domain indices are zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    k: usize,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    seed: u64,
}

/// Result of a fit including the per-restart inertia traces (one entry per
/// assignment step).
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub traces: Vec<Vec<f64>>,
    pub best_restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (idx, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best.1 {
            best = (idx, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.index(points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let chosen = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            rng.index(points.len())
        };
        let c = points[chosen].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

struct LloydRun {
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    trace: Vec<f64>,
}

fn assign_all(centroids: &[Vec<f64>], points: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(centroids, p)).unzip()
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut SeededRng) -> LloydRun {
    let dim = points[0].len();
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut trace = Vec::new();
    let mut labels: Option<Vec<usize>> = None;

    for _ in 0..max_iter {
        let (new_labels, dists) = assign_all(&centroids, points);
        trace.push(dists.iter().sum());
        if labels.as_ref() == Some(&new_labels) {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&new_labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters take the point farthest from its (updated) centroid.
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for (i, (p, &l)) in points.iter().zip(&new_labels).enumerate() {
                if taken[i] {
                    continue;
                }
                let d = sq_dist(p, &centroids[l]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                taken[i] = true;
                centroids[c] = points[i].clone();
            }
        }
        labels = Some(new_labels);
    }

    let (_, dists) = assign_all(&centroids, points);
    LloydRun {
        centroids,
        inertia: dists.iter().sum(),
        trace,
    }
}

fn validate_points(points: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k-means needs k ≥ 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        check_dim("k-means", "point dimension", dim, p.len())?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("k-means point {i}")));
        }
    }
    Ok(())
}

pub fn kmeans_fit_traced(points: &[Vec<f64>], params: KMeansParams, seed: u64) -> Result<KMeansFit> {
    validate_points(points, params.k)?;
    if params.max_iter == 0 || params.restarts == 0 {
        return Err(Error::invalid("k-means needs max_iter ≥ 1 and restarts ≥ 1"));
    }
    let runs: Vec<LloydRun> = (0..params.restarts)
        .into_par_iter()
        .map(|r| lloyd(points, params.k, params.max_iter, &mut rng_derive(seed, r as u64)))
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.inertia < runs[best].inertia {
            best = i;
        }
    }
    let traces = runs.iter().map(|r| r.trace.clone()).collect();
    let winner = runs.into_iter().nth(best).expect("restarts ≥ 1");
    Ok(KMeansFit {
        model: ClusterModel {
            k: params.k,
            centroids: winner.centroids,
            inertia: winner.inertia,
            seed,
        },
        traces,
        best_restart: best,
    })
}

pub fn kmeans_fit(points: &[Vec<f64>], params: KMeansParams, seed: u64) -> Result<ClusterModel> {
    Ok(kmeans_fit_traced(points, params, seed)?.model)
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Index of the nearest centroid by squared Euclidean distance, lowest
    /// index on ties.
    pub fn assign_vector(&self, values: &[f64]) -> Result<usize> {
        check_dim("cluster assign", "embedding dimension", self.dim(), values.len())?;
        Ok(nearest(&self.centroids, values).0)
    }

    pub fn assign(&self, embedding: &StyleEmbedding) -> Result<usize> {
        self.assign_vector(&embedding.values)
    }

    /// Copy with centroids rounded to `f32`, i.e. exactly what
    /// [`ClusterModel::save`] persists. Inertia is unchanged.
    pub fn quantized(&self) -> Self {
        Self {
            centroids: self
                .centroids
                .iter()
                .map(|c| c.iter().map(|&v| v as f32 as f64).collect())
                .collect(),
            ..self.clone()
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let flat: Vec<f32> = self.centroids.iter().flatten().map(|&v| v as f32).collect();
        tns::write(&dir.join("centroids.tns"), &[self.k, self.dim()], &flat)?;
        let meta = ClusterMeta {
            k: self.k,
            seed: self.seed,
            inertia: self.inertia,
        };
        let path = dir.join("cluster.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("cluster.json");
        let meta: ClusterMeta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let (dims, values) = tns::read(&dir.join("centroids.tns"))?;
        if dims.len() != 2 || dims[0] != meta.k || meta.k == 0 {
            return Err(Error::format(
                "centroids.tns",
                format!("unexpected dims {dims:?} for k = {}", meta.k),
            ));
        }
        let centroids = values
            .chunks_exact(dims[1])
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        Ok(Self {
            k: meta.k,
            centroids,
            inertia: meta.inertia,
            seed: meta.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterMeta {
    k: usize,
    seed: u64,
    inertia: f64,
}

/// Splits `items` into `k` subsets by the pseudo-domain of each item's
/// embedding, preserving input order within every subset.
pub fn partition_dataset<T: Clone>(
    items: &[T],
    embeddings: &[StyleEmbedding],
    model: &ClusterModel,
) -> Result<Vec<Vec<T>>> {
    check_dim("partition", "embedding count", items.len(), embeddings.len())?;
    let mut parts = vec![Vec::new(); model.k()];
    for (item, e) in items.iter().zip(embeddings) {
        parts[model.assign(e)?].push(item.clone());
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(values: Vec<f64>) -> StyleEmbedding {
        StyleEmbedding {
            image_id: String::new(),
            values,
        }
    }

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_derive(seed, 0);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (label, center) in [(0usize, 0.0), (1, 10.0)] {
            for _ in 0..20 {
                pts.push(vec![rng.gaussian(center, 0.5), rng.gaussian(center, 0.5)]);
                labels.push(label);
            }
        }
        (pts, labels)
    }

    #[test]
    fn k_equals_n() {
        let pts = vec![vec![0.0, 1.0], vec![5.0, 5.0], vec![-3.0, 2.0]];
        let m = kmeans_fit(
            &pts,
            KMeansParams {
                k: 3,
                max_iter: 50,
                restarts: 3,
            },
            1,
        )
        .unwrap();
        assert_eq!(m.inertia(), 0.0);
        let mut cs = m.centroids().to_vec();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mut expected = pts.clone();
        expected.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, expected);
    }

    #[test]
    fn k_one_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]];
        let m = kmeans_fit(
            &pts,
            KMeansParams {
                k: 1,
                max_iter: 10,
                restarts: 1,
            },
            1,
        )
        .unwrap();
        assert_eq!(m.centroids()[0], vec![2.0, 4.0]);
    }

    #[test]
    fn two_blobs_recovered() {
        let (pts, labels) = blobs(4);
        let m = kmeans_fit(
            &pts,
            KMeansParams {
                k: 2,
                max_iter: 100,
                restarts: 10,
            },
            7,
        )
        .unwrap();
        let assigned: Vec<usize> = pts.iter().map(|p| m.assign_vector(p).unwrap()).collect();
        // Identify the label permutation from the first point.
        let flip = assigned[0] != labels[0];
        for (a, l) in assigned.iter().zip(&labels) {
            assert_eq!(*a, if flip { 1 - l } else { *l });
        }
        // Brute-force nearest centroid agrees with assign.
        for p in &pts {
            let d: Vec<f64> = m.centroids().iter().map(|c| sq_dist(c, p)).collect();
            let brute = if d[0] <= d[1] { 0 } else { 1 };
            assert_eq!(m.assign_vector(p).unwrap(), brute);
        }
    }

    #[test]
    fn errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans_fit(
            &pts,
            KMeansParams {
                k: 3,
                max_iter: 5,
                restarts: 1
            },
            0
        )
        .is_err());
        assert!(kmeans_fit(
            &[vec![f64::NAN]],
            KMeansParams {
                k: 1,
                max_iter: 5,
                restarts: 1
            },
            0
        )
        .is_err());
        assert!(kmeans_fit(
            &pts,
            KMeansParams {
                k: 1,
                max_iter: 0,
                restarts: 1
            },
            0
        )
        .is_err());
    }

    fn fixed_model(centroids: Vec<Vec<f64>>) -> ClusterModel {
        ClusterModel {
            k: centroids.len(),
            centroids,
            inertia: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn assign_exact_and_ties() {
        let m = fixed_model(vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0], vec![9.0, 1.0]]);
        assert_eq!(m.assign(&emb(vec![9.0, 1.0])).unwrap(), 3);
        assert_eq!(m.assign(&emb(vec![1.0, 0.0])).unwrap(), 0);
        assert!(m.assign(&emb(vec![1.0])).is_err());
    }

    #[test]
    fn assign_matches_scan() {
        let mut rng = rng_derive(8, 8);
        let centroids: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let m = fixed_model(centroids.clone());
        for _ in 0..200 {
            let p: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let mut best = 0;
            for i in 1..6 {
                if sq_dist(&centroids[i], &p) < sq_dist(&centroids[best], &p) {
                    best = i;
                }
            }
            assert_eq!(m.assign_vector(&p).unwrap(), best);
        }
    }

    #[test]
    fn partition_cover() {
        let m = fixed_model(vec![vec![0.0], vec![10.0], vec![20.0]]);
        let items: Vec<usize> = (0..10).collect();
        let embs: Vec<StyleEmbedding> = [0.0, 11.0, 19.0, 1.0, 9.0, 2.0, 21.0, 0.5, 12.0, 3.0]
            .iter()
            .map(|&v| emb(vec![v]))
            .collect();
        let parts = partition_dataset(&items, &embs, &m).unwrap();
        assert_eq!(parts, vec![vec![0, 3, 5, 7, 9], vec![1, 4, 8], vec![2, 6]]);
        let mut hist = [0; 3];
        for e in &embs {
            hist[m.assign(e).unwrap()] += 1;
        }
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), hist.to_vec());

        let single = fixed_model(vec![vec![0.0]]);
        assert_eq!(partition_dataset(&items, &embs, &single).unwrap(), vec![items.clone()]);
        let empty: Vec<Vec<usize>> = partition_dataset(&[], &[], &m).unwrap();
        assert_eq!(empty, vec![Vec::<usize>::new(); 3]);
        assert!(partition_dataset(&items, &embs[..3], &m).is_err());
    }

    #[test]
    fn traces_monotone() {
        for seed in 0..20 {
            let mut rng = rng_derive(seed, 1);
            let pts: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let fit = kmeans_fit_traced(
                &pts,
                KMeansParams {
                    k: 4,
                    max_iter: 50,
                    restarts: 4,
                },
                seed,
            )
            .unwrap();
            for t in &fit.traces {
                assert!(t.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            }
        }
    }

    #[test]
    fn duplicate_points_keep_k_clusters() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let m = kmeans_fit(
            &pts,
            KMeansParams {
                k: 3,
                max_iter: 10,
                restarts: 2,
            },
            3,
        )
        .unwrap();
        assert_eq!(m.k(), 3);
        assert_eq!(m.inertia(), 0.0);
    }

    #[test]
    fn save_load_quantized() {
        let (pts, _) = blobs(2);
        let m = kmeans_fit(
            &pts,
            KMeansParams {
                k: 2,
                max_iter: 50,
                restarts: 2,
            },
            5,
        )
        .unwrap()
        .quantized();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(ClusterModel::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn deterministic() {
        let (pts, _) = blobs(9);
        let p = KMeansParams {
            k: 3,
            max_iter: 50,
            restarts: 5,
        };
        assert_eq!(kmeans_fit(&pts, p, 11).unwrap(), kmeans_fit(&pts, p, 11).unwrap());
    }
}
