//! Random-forest regression.
//!
//! Trees are grown on bootstrap samples (one derived stream per tree) and
//! split on the variance-reduction-maximizing threshold over a random
//! subset of features. Thresholds and leaf means are stored as `f32`
//! values so the persisted node records reproduce predictions exactly.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numcore::{rng_derive, SeededRng};

const LEAF: u32 = u32::MAX;
const TREE_MAGIC: &[u8; 4] = b"RFT1";
const RECORD_FIELDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features considered per split; `None` means `⌈p/3⌉`.
    pub max_features: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_features: None,
            min_samples_leaf: 2,
            max_depth: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn features_per_split(&self, p: usize) -> usize {
        self.max_features.unwrap_or(p.div_ceil(3)).clamp(1, p)
    }
}

/// Flat node record. Leaves have `feature == u32::MAX`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub feature: u32,
    pub threshold: f32,
    pub left: u32,
    pub right: u32,
    pub leaf_mean: f32,
    pub count: u32,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.feature == LEAF
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

/// Best split found at a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f32,
    /// Reduction of the sum of squared deviations.
    pub gain: f64,
}

/// The `f32` threshold `t` with `lo ≤ t < hi` nearest the midpoint, if any.
fn f32_threshold(lo: f64, hi: f64) -> Option<f32> {
    let mut t = ((lo + hi) / 2.0) as f32;
    if (t as f64) < lo {
        t = t.next_up();
    }
    if (t as f64) >= hi {
        t = t.next_down();
    }
    (lo <= t as f64 && (t as f64) < hi).then_some(t)
}

/// Leaf value rounded to `f32` but kept inside `[lo, hi]` when possible.
fn f32_leaf(mean: f64, lo: f64, hi: f64) -> f32 {
    let mut v = mean as f32;
    if (v as f64) > hi {
        v = v.next_down();
    }
    if (v as f64) < lo {
        v = v.next_up();
    }
    v
}

/// Exhaustive best split of `idx` over `features`; candidate thresholds sit
/// between consecutive distinct sorted values. Ties resolve to the lower
/// feature index, then the lower threshold.
pub fn best_split(
    rows: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    features: &[usize],
    min_samples_leaf: usize,
) -> Option<Split> {
    let n = idx.len();
    let min_leaf = min_samples_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<Split> = None;
    let mut order = idx.to_vec();

    for &f in features {
        order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        for pos in 0..n - 1 {
            left_sum += y[order[pos]];
            let n_left = pos + 1;
            let lo = rows[order[pos]][f];
            let hi = rows[order[pos + 1]][f];
            if n_left < min_leaf || n - n_left < min_leaf || lo == hi {
                continue;
            }
            let Some(threshold) = f32_threshold(lo, hi) else {
                continue;
            };
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
            let gain = score - parent;
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(Split {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

struct Builder<'a> {
    rows: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    n_features: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> u32 {
        let vals = idx.iter().map(|&i| self.y[i]);
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node {
            feature: LEAF,
            threshold: 0.0,
            left: LEAF,
            right: LEAF,
            leaf_mean: f32_leaf(mean, lo, hi),
            count: idx.len() as u32,
        });
        (self.nodes.len() - 1) as u32
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut SeededRng) -> u32 {
        let first = self.y[idx[0]];
        let constant = idx.iter().all(|&i| self.y[i] == first);
        if constant || self.params.max_depth.is_some_and(|d| depth >= d) {
            return self.leaf(idx);
        }
        let p = self.rows[0].len();
        let mut pool: Vec<usize> = (0..p).collect();
        for i in 0..self.n_features {
            let j = i + rng.index(p - i);
            pool.swap(i, j);
        }
        let mut features = pool[..self.n_features].to_vec();
        features.sort_unstable();

        let split = match best_split(self.rows, self.y, idx, &features, self.params.min_samples_leaf) {
            Some(s) if s.gain > 0.0 => s,
            _ => return self.leaf(idx),
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.rows[i][split.feature] <= split.threshold as f64);
        debug_assert!(!left.is_empty() && !right.is_empty());

        let me = self.nodes.len();
        self.nodes.push(Node {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: 0,
            right: 0,
            leaf_mean: 0.0,
            count: idx.len() as u32,
        });
        let l = self.grow(&left, depth + 1, rng);
        let r = self.grow(&right, depth + 1, rng);
        self.nodes[me].left = l;
        self.nodes[me].right = r;
        me as u32
    }
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Index of the leaf reached by `z`.
    pub fn leaf_for(&self, z: &[f64]) -> usize {
        let mut at = 0usize;
        loop {
            let node = &self.nodes[at];
            if node.is_leaf() {
                return at;
            }
            at = if z[node.feature as usize] <= node.threshold as f64 {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.nodes[self.leaf_for(z)].leaf_mean as f64
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            let n = &nodes[at];
            if n.is_leaf() {
                0
            } else {
                1 + go(nodes, n.left as usize).max(go(nodes, n.right as usize))
            }
        }
        go(&self.nodes, 0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 24 * self.nodes.len());
        out.extend_from_slice(TREE_MAGIC);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(RECORD_FIELDS as u32).to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&n.feature.to_le_bytes());
            out.extend_from_slice(&n.threshold.to_le_bytes());
            out.extend_from_slice(&n.left.to_le_bytes());
            out.extend_from_slice(&n.right.to_le_bytes());
            out.extend_from_slice(&n.leaf_mean.to_le_bytes());
            out.extend_from_slice(&n.count.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |at: usize| -> Result<[u8; 4]> {
            bytes
                .get(at..at + 4)
                .map(|b| [b[0], b[1], b[2], b[3]])
                .ok_or_else(|| Error::format("tree file", "truncated"))
        };
        if bytes.len() < 16 || &bytes[..4] != TREE_MAGIC {
            return Err(Error::format("tree file", "bad magic"));
        }
        let rank = u32::from_le_bytes(word(4)?);
        let count = u32::from_le_bytes(word(8)?) as usize;
        let fields = u32::from_le_bytes(word(12)?) as usize;
        if rank != 2 || fields != RECORD_FIELDS || bytes.len() != 16 + 24 * count || count == 0 {
            return Err(Error::format("tree file", "unexpected header or length"));
        }
        let mut nodes = Vec::with_capacity(count);
        for i in 0..count {
            let at = 16 + 24 * i;
            let node = Node {
                feature: u32::from_le_bytes(word(at)?),
                threshold: f32::from_le_bytes(word(at + 4)?),
                left: u32::from_le_bytes(word(at + 8)?),
                right: u32::from_le_bytes(word(at + 12)?),
                leaf_mean: f32::from_le_bytes(word(at + 16)?),
                count: u32::from_le_bytes(word(at + 20)?),
            };
            if !node.is_leaf() && (node.left as usize >= count || node.right as usize >= count) {
                return Err(Error::format("tree file", format!("node {i} has a dangling child")));
            }
            nodes.push(node);
        }
        Ok(Self { nodes })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    trees: Vec<RegressionTree>,
    params: ForestParams,
    seed: u64,
    input_dim: usize,
}

fn validate(rows: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if rows.len() < 2 {
        return Err(Error::invalid(format!(
            "forest needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    check_dim("forest fit", "target count", rows.len(), y.len())?;
    let p = rows[0].len();
    if p == 0 {
        return Err(Error::invalid("forest needs at least one feature"));
    }
    for (i, r) in rows.iter().enumerate() {
        check_dim("forest fit", "feature dimension", p, r.len())?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("forest row {i}")));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forest targets".into()));
    }
    Ok(p)
}

/// Fits a forest; tree `t` draws from `rng_derive(seed, t)`, so results do
/// not depend on how trees are scheduled across threads.
pub fn rf_fit(rows: &[Vec<f64>], y: &[f64], params: ForestParams, seed: u64) -> Result<ForestModel> {
    let p = validate(rows, y)?;
    if params.n_trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let n = rows.len();
    let n_features = params.features_per_split(p);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_derive(seed, t as u64);
            let idx: Vec<usize> = if params.bootstrap {
                let mut s: Vec<usize> = (0..n).map(|_| rng.index(n)).collect();
                s.sort_unstable();
                s
            } else {
                (0..n).collect()
            };
            let mut b = Builder {
                rows,
                y,
                params: &params,
                n_features,
                nodes: Vec::new(),
            };
            b.grow(&idx, 0, &mut rng);
            RegressionTree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel {
        trees,
        params,
        seed,
        input_dim: p,
    })
}

impl ForestModel {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Mean of per-tree leaf predictions.
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        check_dim("forest predict", "feature dimension", self.input_dim, z.len())?;
        Ok(self.trees.iter().map(|t| t.predict(z)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, t) in self.trees.iter().enumerate() {
            let path = dir.join(format!("tree_{i:04}.bin"));
            fs::write(&path, t.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        let meta = ForestMeta {
            n_trees: self.trees.len(),
            params: self.params,
            seed: self.seed,
            input_dim: self.input_dim,
        };
        let path = dir.join("forest.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("forest.json");
        let meta: ForestMeta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let trees = (0..meta.n_trees)
            .map(|i| {
                let path = dir.join(format!("tree_{i:04}.bin"));
                RegressionTree::from_bytes(&fs::read(&path).map_err(|e| Error::io(&path, e))?)
            })
            .collect::<Result<Vec<_>>>()?;
        for t in &trees {
            if t.nodes
                .iter()
                .any(|n| !n.is_leaf() && n.feature as usize >= meta.input_dim)
            {
                return Err(Error::format("tree file", "split feature exceeds input dimension"));
            }
        }
        Ok(Self {
            trees,
            params: meta.params,
            seed: meta.seed,
            input_dim: meta.input_dim,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ForestMeta {
    n_trees: usize,
    params: ForestParams,
    seed: u64,
    input_dim: usize,
}
