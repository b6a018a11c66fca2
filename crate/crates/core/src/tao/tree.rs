use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::effectcurve::EffectCurveGrid;
use crate::error::{Error, Result};

/// Axis-aligned rule: `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub feature: usize,
    pub threshold: f64,
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, x: &[f64]) -> bool {
        x[self.feature] <= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        rule: SplitRule,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Dose on the standardized [0, 1] scale.
        dose: f64,
        /// Training samples routed here.
        n_samples: usize,
    },
}

/// Binary dose tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseTree {
    nodes: Vec<Node>,
}

impl DoseTree {
    pub fn leaf(dose: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { dose, n_samples: 0 }],
        }
    }

    /// Builds from an arena, checking that every node is reachable exactly
    /// once from the root.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidData("dose tree has no nodes".into()));
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if id >= nodes.len() || seen[id] {
                return Err(Error::InvalidData(format!(
                    "dose tree node {id} is missing or shared"
                )));
            }
            seen[id] = true;
            match &nodes[id] {
                Node::Split { rule, left, right } => {
                    if !rule.threshold.is_finite() {
                        return Err(Error::InvalidData("non-finite split threshold".into()));
                    }
                    stack.push(*left);
                    stack.push(*right);
                }
                Node::Leaf { dose, .. } => {
                    if !dose.is_finite() {
                        return Err(Error::InvalidData("non-finite leaf dose".into()));
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidData("dose tree has unreachable nodes".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Id of the leaf that `x` is routed to.
    pub fn leaf_id(&self, x: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Split { rule, left, right } => {
                    id = if rule.goes_left(x) { *left } else { *right }
                }
            }
        }
    }

    pub fn assigned_dose(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_id(x)] {
            Node::Leaf { dose, .. } => dose,
            Node::Split { .. } => unreachable!("leaf_id returns a leaf"),
        }
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        fn go(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaf_ids(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit_preorder(|id, node| {
            if matches!(node, Node::Leaf { .. }) {
                out.push(id);
            }
        });
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_ids().len()
    }

    /// Largest feature index used by a split, if any.
    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { rule, .. } => Some(rule.feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Preorder walk (node, then left subtree, then right subtree).
    pub fn visit_preorder(&self, mut f: impl FnMut(usize, &Node)) {
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            f(id, node);
            if let Node::Split { left, right, .. } = node {
                stack.push(*right);
                stack.push(*left);
            }
        }
    }

    /// Training samples routed to each node (including internal nodes).
    pub fn node_members(&self, x: &Array2<f64>) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.nodes.len()];
        for i in 0..x.nrows() {
            let row = x.row(i);
            let row = row.as_slice().expect("standard layout");
            let mut id = 0;
            loop {
                members[id].push(i);
                match &self.nodes[id] {
                    Node::Leaf { .. } => break,
                    Node::Split { rule, left, right } => {
                        id = if rule.goes_left(row) { *left } else { *right }
                    }
                }
            }
        }
        members
    }

    /// Recomputes leaf occupancy counts from training covariates.
    pub fn with_leaf_counts(mut self, x: &Array2<f64>) -> Self {
        let members = self.node_members(x);
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if let Node::Leaf { n_samples, .. } = node {
                *n_samples = members[id].len();
            }
        }
        self
    }

    /// Rebuilds the arena in preorder, dropping unreachable nodes.
    pub(crate) fn compacted(&self) -> Self {
        fn copy(src: &[Node], id: usize, out: &mut Vec<Node>) -> usize {
            let slot = out.len();
            match &src[id] {
                Node::Leaf { .. } => {
                    out.push(src[id].clone());
                }
                Node::Split { rule, left, right } => {
                    out.push(Node::Leaf {
                        dose: 0.0,
                        n_samples: 0,
                    });
                    let l = copy(src, *left, out);
                    let r = copy(src, *right, out);
                    out[slot] = Node::Split {
                        rule: *rule,
                        left: l,
                        right: r,
                    };
                }
            }
            slot
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        copy(&self.nodes, 0, &mut out);
        Self { nodes: out }
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut Vec<Node> {
        &mut self.nodes
    }

    /// Applies `f` to every leaf dose.
    pub fn map_doses(&self, f: impl Fn(f64) -> f64) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|n| match n {
                Node::Leaf { dose, n_samples } => Node::Leaf {
                    dose: f(*dose),
                    n_samples: *n_samples,
                },
                other => other.clone(),
            })
            .collect();
        Self { nodes }
    }
}

/// `sum_i theta_i(g(x_i))`, doses snapped to the nearest grid point.
pub fn objective(tree: &DoseTree, curves: &EffectCurveGrid, x: &Array2<f64>) -> f64 {
    let grid = curves.grid();
    (0..x.nrows())
        .map(|i| {
            let row = x.row(i);
            let d = tree.assigned_dose(row.as_slice().expect("standard layout"));
            curves.value(i, grid.nearest_index(d))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effectcurve::DoseGrid;

    fn stump(feature: usize, threshold: f64, l: f64, r: f64) -> DoseTree {
        DoseTree::from_nodes(vec![
            Node::Split {
                rule: SplitRule { feature, threshold },
                left: 1,
                right: 2,
            },
            Node::Leaf {
                dose: l,
                n_samples: 0,
            },
            Node::Leaf {
                dose: r,
                n_samples: 0,
            },
        ])
        .unwrap()
    }

    #[test]
    fn routing_and_ties() {
        let t = stump(0, 0.5, 0.2, 0.8);
        assert_eq!(t.assigned_dose(&[0.3, 9.0]), 0.2);
        assert_eq!(t.assigned_dose(&[0.5, 9.0]), 0.2);
        assert_eq!(t.assigned_dose(&[0.51, 9.0]), 0.8);
        assert_eq!(t.height(), 1);
        assert_eq!(t.n_leaves(), 2);
    }

    #[test]
    fn rejects_bad_arenas() {
        assert!(DoseTree::from_nodes(vec![]).is_err());
        let cyclic = vec![Node::Split {
            rule: SplitRule {
                feature: 0,
                threshold: 0.0,
            },
            left: 0,
            right: 0,
        }];
        assert!(DoseTree::from_nodes(cyclic).is_err());
        let orphan = vec![
            Node::Leaf {
                dose: 0.1,
                n_samples: 0,
            },
            Node::Leaf {
                dose: 0.2,
                n_samples: 0,
            },
        ];
        assert!(DoseTree::from_nodes(orphan).is_err());
    }

    #[test]
    fn single_leaf_objective() {
        let grid = DoseGrid::uniform(11).unwrap();
        let v = Array2::from_shape_fn((3, 11), |(i, g)| (i * 11 + g) as f64);
        let curves = EffectCurveGrid::new(v, grid).unwrap();
        let x = Array2::zeros((3, 1));
        let total = objective(&DoseTree::leaf(0.3), &curves, &x);
        assert_eq!(total, 3.0 + 14.0 + 25.0);
    }

    #[test]
    fn complement_rule_gives_same_objective() {
        // Feature 1 is the complement of the two-point feature 0.
        let x = Array2::from_shape_fn((6, 2), |(i, k)| {
            let b = (i % 2) as f64;
            if k == 0 {
                b
            } else {
                1.0 - b
            }
        });
        let grid = DoseGrid::uniform(5).unwrap();
        let v = Array2::from_shape_fn((6, 5), |(i, g)| ((i * 3 + g * 7) % 5) as f64);
        let curves = EffectCurveGrid::new(v, grid).unwrap();
        let a = stump(0, 0.5, 0.25, 1.0);
        let b = stump(1, 0.5, 1.0, 0.25);
        assert_eq!(objective(&a, &curves, &x), objective(&b, &curves, &x));
    }

    #[test]
    fn compaction_keeps_routing() {
        let nodes = vec![
            Node::Split {
                rule: SplitRule {
                    feature: 0,
                    threshold: 0.0,
                },
                left: 2,
                right: 1,
            },
            Node::Leaf {
                dose: 0.9,
                n_samples: 0,
            },
            Node::Leaf {
                dose: 0.1,
                n_samples: 0,
            },
        ];
        let t = DoseTree::from_nodes(nodes).unwrap();
        let c = t.compacted();
        for v in [-1.0, 0.0, 1.0] {
            assert_eq!(t.assigned_dose(&[v]), c.assigned_dose(&[v]));
        }
        assert!(matches!(c.nodes()[1], Node::Leaf { dose, .. } if dose == 0.1));
    }
}
