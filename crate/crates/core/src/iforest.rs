//! Isolation forest over low-dimensional feature points.
//!
//! Anomaly score `s(p) = 2^(−E[h(p)] / c(ψ))`, where `h` is the path length
//! (plus `c(size)` at external nodes) and `c(m) = 2H(m−1) − 2(m−1)/m` is the
//! average unsuccessful-search length of a binary search tree.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForestError {
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("invalid forest parameters: {0}")]
    Params(String),
    #[error("point has {got} dimensions, forest expects {expected}")]
    Dim { got: usize, expected: usize },
}

const EXACT_HARMONIC_LIMIT: usize = 1_000_000;

/// `H(n) = Σ_{k=1..n} 1/k`, exact summation up to 10⁶ terms and the
/// asymptotic expansion beyond.
pub fn harmonic(n: usize) -> f64 {
    if n <= EXACT_HARMONIC_LIMIT {
        (1..=n).map(|k| 1.0 / k as f64).sum()
    } else {
        let x = n as f64;
        math::ln(x) + 0.577_215_664_901_532_9 + 1.0 / (2.0 * x) - 1.0 / (12.0 * x * x)
    }
}

/// Average path length normaliser `c(m)`; `c(0) = c(1) = 0`.
pub fn path_norm(m: usize) -> f64 {
    if m <= 1 {
        return 0.0;
    }
    let mf = m as f64;
    2.0 * harmonic(m - 1) - 2.0 * (mf - 1.0) / mf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal { split_dim: usize, split_value: f64, left: usize, right: usize },
    External { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoTree {
    pub nodes: Vec<Node>,
    pub height_limit: usize,
}

impl IsoTree {
    fn build(points: &[&[f64]], height_limit: usize, r: &mut rng::Rng) -> Self {
        let mut tree = IsoTree { nodes: Vec::new(), height_limit };
        tree.grow(points.to_vec(), 0, r);
        tree
    }

    fn grow(&mut self, pts: Vec<&[f64]>, depth: usize, r: &mut rng::Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::External { size: pts.len() });
        if depth >= self.height_limit || pts.len() <= 1 {
            return id;
        }
        let dim = pts[0].len();
        let ranges: Vec<(usize, f64, f64)> = (0..dim)
            .filter_map(|d| {
                let lo = pts.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
                (lo < hi).then_some((d, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (d, lo, hi) = ranges[r.gen_range(0..ranges.len())];
        let mut split = lo + r.gen::<f64>() * (hi - lo);
        // keep the split strictly inside (lo, hi)
        while !(split > lo && split < hi) {
            split = lo + r.gen::<f64>() * (hi - lo);
        }
        let (left, right): (Vec<&[f64]>, Vec<&[f64]>) = pts.into_iter().partition(|p| p[d] < split);
        let l = self.grow(left, depth + 1, r);
        let rr = self.grow(right, depth + 1, r);
        self.nodes[id] = Node::Internal { split_dim: d, split_value: split, left: l, right: rr };
        id
    }

    /// Path length of `p` with the external-node adjustment.
    pub fn path_length(&self, p: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Internal { split_dim, split_value, left, right } => {
                    node = if p[split_dim] < split_value { left } else { right };
                    depth += 1.0;
                }
                Node::External { size } => return depth + path_norm(size),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Subsample size; `None` means `min(256, N)`.
    pub subsample: Option<usize>,
    pub contamination: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, subsample: None, contamination: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoForest {
    pub trees: Vec<IsoTree>,
    pub dim: usize,
    pub subsample: usize,
    pub contamination: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl IsoForest {
    pub fn fit<P: AsRef<[f64]>>(points: &[P], params: &ForestParams) -> Result<Self, ForestError> {
        let n = points.len();
        if params.n_trees == 0 {
            return Err(ForestError::Params("n_trees must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&params.contamination) {
            return Err(ForestError::Params(format!("contamination must lie in [0, 0.5), got {}", params.contamination)));
        }
        let pts: Vec<&[f64]> = points.iter().map(|p| p.as_ref()).collect();
        let dim = pts.first().map_or(0, |p| p.len());
        if dim == 0 {
            return Err(ForestError::Degenerate("no points".into()));
        }
        if let Some(p) = pts.iter().find(|p| p.len() != dim) {
            return Err(ForestError::Dim { got: p.len(), expected: dim });
        }
        if pts.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(ForestError::Degenerate("non-finite feature value".into()));
        }
        if pts.iter().all(|p| *p == pts[0]) {
            return Err(ForestError::Degenerate("fewer than 2 distinct points".into()));
        }
        let psi = params.subsample.unwrap_or(256).min(n);
        if psi < 2 {
            return Err(ForestError::Params(format!("subsample must be >= 2, got {psi}")));
        }
        let height_limit = math::ceil(math::log2(psi as f64)) as usize;
        let trees = (0..params.n_trees)
            .map(|i| {
                let mut r = rng::stream(params.seed, i as u64);
                let idx = sample(&mut r, n, psi);
                let sub: Vec<&[f64]> = idx.iter().map(|j| pts[j]).collect();
                IsoTree::build(&sub, height_limit, &mut r)
            })
            .collect();
        let mut forest = IsoForest {
            trees,
            dim,
            subsample: psi,
            contamination: params.contamination,
            threshold: 0.0,
            seed: params.seed,
        };
        let scores: Vec<f64> = pts.iter().map(|p| forest.score_unchecked(p)).collect();
        forest.threshold = stats::quantile(&scores, 1.0 - params.contamination);
        Ok(forest)
    }

    fn score_unchecked(&self, p: &[f64]) -> f64 {
        let mean_h = self.trees.iter().map(|t| t.path_length(p)).sum::<f64>() / self.trees.len() as f64;
        libm::exp2(-mean_h / path_norm(self.subsample))
    }

    /// Anomaly score in `(0, 1]`; higher is more anomalous.
    pub fn score(&self, p: &[f64]) -> Result<f64, ForestError> {
        if p.len() != self.dim {
            return Err(ForestError::Dim { got: p.len(), expected: self.dim });
        }
        Ok(self.score_unchecked(p))
    }

    /// `true` when the point lies strictly beyond the fitted boundary.
    pub fn predict(&self, p: &[f64]) -> Result<bool, ForestError> {
        Ok(self.score(p)? > self.threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cluster(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut r = rng::stream(seed, 1);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| [d.sample(&mut r), d.sample(&mut r)]).collect()
    }

    #[test]
    fn normaliser_values() {
        assert_eq!(path_norm(1), 0.0);
        assert_eq!(path_norm(2), 1.0);
        let c3 = 2.0 * (1.0 + 0.5) - 2.0 * 2.0 / 3.0;
        assert!((path_norm(3) - c3).abs() < 1e-15);
        let big = harmonic(EXACT_HARMONIC_LIMIT + 1);
        assert!((big - harmonic(EXACT_HARMONIC_LIMIT) - 1.0 / (EXACT_HARMONIC_LIMIT + 1) as f64).abs() < 1e-9);
    }

    #[test]
    fn planted_outlier_scores_above_cluster() {
        let pts = cluster(1000, 7);
        let f = IsoForest::fit(&pts, &ForestParams { contamination: 0.01, seed: 3, ..Default::default() }).unwrap();
        let scores: Vec<f64> = pts.iter().map(|p| f.score(p).unwrap()).collect();
        let p99 = stats::quantile(&scores, 0.99);
        let out = f.score(&[12.0, -12.0]).unwrap();
        assert!(out > p99);
        assert!(f.predict(&[12.0, -12.0]).unwrap());
        assert!(scores.iter().all(|s| *s > 0.0 && *s <= 1.0));
        let flagged = scores.iter().filter(|s| **s > f.threshold).count();
        assert!(flagged <= 10, "{flagged}");
    }

    #[test]
    fn medoid_is_normal_and_contamination_zero_flags_nothing() {
        let pts = cluster(400, 11);
        let medoid = pts
            .iter()
            .min_by(|a, b| {
                let da: f64 = pts.iter().map(|q| ((a[0] - q[0]).powi(2) + (a[1] - q[1]).powi(2)).sqrt()).sum();
                let db: f64 = pts.iter().map(|q| ((b[0] - q[0]).powi(2) + (b[1] - q[1]).powi(2)).sqrt()).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        let f = IsoForest::fit(&pts, &ForestParams { contamination: 0.05, seed: 1, ..Default::default() }).unwrap();
        assert!(!f.predict(medoid).unwrap());
        let f0 = IsoForest::fit(&pts, &ForestParams { contamination: 0.0, seed: 1, ..Default::default() }).unwrap();
        assert!(pts.iter().all(|p| !f0.predict(p).unwrap()));
        let max = pts.iter().map(|p| f0.score(p).unwrap()).fold(0.0, f64::max);
        assert_eq!(f0.threshold, max);
    }

    #[test]
    fn splits_strictly_inside_and_deterministic() {
        let pts = cluster(300, 2);
        let a = IsoForest::fit(&pts, &ForestParams { n_trees: 20, seed: 9, ..Default::default() }).unwrap();
        let b = IsoForest::fit(&pts, &ForestParams { n_trees: 20, seed: 9, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trees[0].height_limit, 8);
        for t in &a.trees {
            for n in &t.nodes {
                if let Node::Internal { split_value, .. } = n {
                    assert!(split_value.is_finite());
                }
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let same = [[1.0, 1.0]; 10];
        assert!(matches!(IsoForest::fit(&same, &ForestParams::default()), Err(ForestError::Degenerate(_))));
        let pts = cluster(10, 1);
        let bad = ForestParams { contamination: 0.5, ..Default::default() };
        assert!(IsoForest::fit(&pts, &bad).is_err());
        let f = IsoForest::fit(&pts, &ForestParams::default()).unwrap();
        assert!(f.score(&[1.0]).is_err());
    }
}
