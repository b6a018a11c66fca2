//! Least-squares regression trees and gradient boosting on top of them.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Regressor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
        n_samples: usize,
    },
}

/// Binary regression tree grown greedily by squared-error reduction.
/// Rule convention: `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
    n_features: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

struct Grower<'a> {
    x: &'a Array2<f64>,
    y: &'a [f64],
    params: TreeParams,
    /// Per feature, row indices sorted by that feature's value.
    order: &'a [Vec<usize>],
    member: Vec<bool>,
    nodes: Vec<TreeNode>,
    importance: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&i| self.y[i]).sum();
        self.nodes.push(TreeNode::Leaf {
            value: sum / n as f64,
            n_samples: n,
        });
        if depth >= self.params.max_depth || n < 2 * self.params.min_samples_leaf.max(1) {
            return id;
        }
        let Some(best) = self.best_split(&rows, sum) else {
            return id;
        };
        self.importance[best.feature] += best.gain;
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[[i, best.feature]] <= best.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, rows: &[usize], sum: f64) -> Option<BestSplit> {
        let n = rows.len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        for &i in rows {
            self.member[i] = true;
        }
        let parent = sum * sum / n as f64;
        let mut best: Option<BestSplit> = None;
        let mut sorted = Vec::with_capacity(n);
        for (k, order) in self.order.iter().enumerate() {
            sorted.clear();
            sorted.extend(order.iter().copied().filter(|&i| self.member[i]));
            let mut left_sum = 0.0;
            for (pos, w) in sorted.windows(2).enumerate() {
                left_sum += self.y[w[0]];
                let nl = pos + 1;
                let nr = n - nl;
                let (xa, xb) = (self.x[[w[0], k]], self.x[[w[1], k]]);
                if nl < min_leaf || nr < min_leaf || xa == xb {
                    continue;
                }
                let right_sum = sum - left_sum;
                let gain =
                    left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - parent;
                if gain > 1e-12 * (1.0 + parent.abs())
                    && best.as_ref().is_none_or(|b| gain > b.gain)
                {
                    best = Some(BestSplit {
                        feature: k,
                        threshold: 0.5 * (xa + xb),
                        gain,
                    });
                }
            }
        }
        for &i in rows {
            self.member[i] = false;
        }
        best
    }
}

fn sorted_orders(x: &Array2<f64>) -> Vec<Vec<usize>> {
    (0..x.ncols())
        .map(|k| {
            let mut idx: Vec<usize> = (0..x.nrows()).collect();
            idx.sort_by(|&a, &b| x[[a, k]].total_cmp(&x[[b, k]]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

impl RegressionTree {
    pub fn fit(x: &Array2<f64>, y: &[f64], params: TreeParams) -> (Self, Vec<f64>) {
        let order = sorted_orders(x);
        let rows: Vec<usize> = (0..x.nrows()).collect();
        Self::fit_rows(x, y, &order, rows, params)
    }

    fn fit_rows(
        x: &Array2<f64>,
        y: &[f64],
        order: &[Vec<usize>],
        rows: Vec<usize>,
        params: TreeParams,
    ) -> (Self, Vec<f64>) {
        let mut g = Grower {
            x,
            y,
            params,
            order,
            member: vec![false; x.nrows()],
            nodes: Vec::new(),
            importance: vec![0.0; x.ncols()],
        };
        g.grow(rows, 0);
        (
            Self {
                nodes: g.nodes,
                n_features: x.ncols(),
            },
            g.importance,
        )
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                TreeNode::Leaf { value, .. } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if row[feature] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    fn scale_leaves(&mut self, factor: f64) {
        for node in &mut self.nodes {
            if let TreeNode::Leaf { value, .. } = node {
                *value *= factor;
            }
        }
    }
}

/// Hyperparameters of the gradient-boosted trees regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Row subsampling fraction per round; 1.0 disables subsampling.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            n_rounds: 200,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 5,
            subsample: 1.0,
            seed: 0,
        }
    }
}

/// Squared-loss gradient boosting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gbt {
    base: f64,
    trees: Vec<RegressionTree>,
    importance: Vec<f64>,
}

impl Gbt {
    pub fn fit(x: &Array2<f64>, y: &[f64], cfg: &GbtConfig) -> Self {
        let n = x.nrows();
        let base = y.iter().sum::<f64>() / n as f64;
        let mut pred = vec![base; n];
        let mut resid = vec![0.0; n];
        let order = sorted_orders(x);
        let params = TreeParams {
            max_depth: cfg.max_depth,
            min_samples_leaf: cfg.min_samples_leaf,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_sub = ((cfg.subsample.clamp(0.0, 1.0) * n as f64).round() as usize).clamp(1, n);
        let mut importance = vec![0.0; x.ncols()];
        let mut trees = Vec::with_capacity(cfg.n_rounds);
        for _ in 0..cfg.n_rounds {
            for i in 0..n {
                resid[i] = y[i] - pred[i];
            }
            let rows: Vec<usize> = if n_sub < n {
                let mut r = sample(&mut rng, n, n_sub).into_vec();
                r.sort_unstable();
                r
            } else {
                (0..n).collect()
            };
            let (mut tree, imp) = RegressionTree::fit_rows(x, &resid, &order, rows, params);
            if tree.nodes.len() == 1 {
                // No split improves the residuals; further rounds would repeat this.
                if n_sub == n {
                    break;
                }
                continue;
            }
            tree.scale_leaves(cfg.learning_rate);
            for (acc, g) in importance.iter_mut().zip(imp) {
                *acc += g;
            }
            for (i, p) in pred.iter_mut().enumerate() {
                *p += tree.predict(x.row(i).as_slice().expect("standard layout"));
            }
            trees.push(tree);
        }
        Self {
            base,
            trees,
            importance,
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

impl Regressor for Gbt {
    fn predict(&self, row: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    fn feature_importance(&self) -> Vec<f64> {
        self.importance.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_finds_step() {
        let x = Array2::from_shape_fn((40, 2), |(i, k)| if k == 0 { i as f64 } else { 0.0 });
        let y: Vec<f64> = (0..40).map(|i| if i < 15 { 1.0 } else { 5.0 }).collect();
        let (tree, imp) = RegressionTree::fit(
            &x,
            &y,
            TreeParams {
                max_depth: 1,
                min_samples_leaf: 1,
            },
        );
        match tree.nodes()[0] {
            TreeNode::Split {
                feature, threshold, ..
            } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 14.5);
            }
            _ => panic!("expected split"),
        }
        assert_eq!(tree.predict(&[3.0, 0.0]), 1.0);
        assert_eq!(tree.predict(&[30.0, 0.0]), 5.0);
        assert!(imp[0] > 0.0 && imp[1] == 0.0);
    }

    #[test]
    fn min_leaf_respected() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..20).map(|i| if i == 0 { 100.0 } else { 0.0 }).collect();
        let (tree, _) = RegressionTree::fit(
            &x,
            &y,
            TreeParams {
                max_depth: 3,
                min_samples_leaf: 5,
            },
        );
        for node in tree.nodes() {
            if let TreeNode::Leaf { n_samples, .. } = node {
                assert!(*n_samples >= 5);
            }
        }
    }

    #[test]
    fn boosting_constant_target_is_exact() {
        let x = Array2::from_shape_fn((30, 2), |(i, k)| (i * (k + 1)) as f64 * 0.1);
        let y = vec![3.0; 30];
        let m = Gbt::fit(&x, &y, &GbtConfig::default());
        assert_eq!(m.n_trees(), 0);
        assert_eq!(m.predict(&[1.0, 2.0]), 3.0);
    }

    #[test]
    fn subsampled_boosting_is_seeded() {
        let x = Array2::from_shape_fn((60, 2), |(i, k)| ((i * 7 + k * 13) % 17) as f64);
        let y: Vec<f64> = (0..60).map(|i| (i % 5) as f64).collect();
        let cfg = GbtConfig {
            subsample: 0.5,
            seed: 9,
            n_rounds: 20,
            ..GbtConfig::default()
        };
        let a = Gbt::fit(&x, &y, &cfg);
        let b = Gbt::fit(&x, &y, &cfg);
        for i in 0..60 {
            let r = x.row(i).to_vec();
            assert_eq!(a.predict(&r).to_bits(), b.predict(&r).to_bits());
        }
    }
}
