//! Non-greedy dose-tree optimization.
//!
//! A complete tree of fixed height is improved by alternating over depth
//! levels: every internal node is re-fit with the rest of the tree held
//! fixed (a threshold sweep per feature, then an annealed choice between the
//! per-feature winners), and every leaf takes the grid dose maximizing the
//! summed curves of its members. Levels are visited root to leaves, then the
//! leaves, then leaves to root. Undersized leaves are collapsed after
//! convergence.

mod tree;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effectcurve::EffectCurveGrid;
use crate::error::{Error, Result};

pub use tree::{objective, DoseTree, Node, SplitRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaoConfig {
    pub height: usize,
    /// Minimum leaf occupancy after pruning; `None` means `max(10, n / 50)`.
    pub min_leaf: Option<usize>,
    pub max_sweeps: usize,
    /// Relative objective change treated as converged.
    pub tol: f64,
    /// Random-tree restarts in addition to the greedy start.
    pub restarts: usize,
    pub seed: u64,
    /// Keep the objective after every node update (for diagnostics).
    pub record_updates: bool,
    /// Reject node updates that create a nonempty leaf below `min_leaf`.
    pub constrain_leaves: bool,
}

impl Default for TaoConfig {
    fn default() -> Self {
        Self {
            height: 2,
            min_leaf: None,
            max_sweeps: 50,
            tol: 1e-9,
            restarts: 5,
            seed: 0,
            record_updates: false,
            constrain_leaves: true,
        }
    }
}

impl TaoConfig {
    pub fn min_leaf_for(&self, n: usize) -> usize {
        self.min_leaf.unwrap_or_else(|| (n / 50).max(10))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 1 {
            return Err(Error::Config("tree height must be at least 1".into()));
        }
        if self.height > 12 {
            return Err(Error::Config(
                "tree height above 12 is not supported".into(),
            ));
        }
        if self.max_sweeps < 1 {
            return Err(Error::Config("max_sweeps must be at least 1".into()));
        }
        if self.min_leaf == Some(0) {
            return Err(Error::Config("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

/// `alpha_t = alpha0 * t`, nondecreasing in the cycle counter `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    /// `None` picks `10 / R` where `R = sum_i (max theta_i - min theta_i)`
    /// is the span of attainable objective values.
    pub alpha0: Option<f64>,
    /// Pure argmax updates with no sampling.
    pub deterministic: bool,
}

impl AnnealSchedule {
    pub fn deterministic() -> Self {
        Self {
            alpha0: None,
            deterministic: true,
        }
    }

    pub fn alpha(alpha0: f64, t: usize) -> f64 {
        alpha0 * t as f64
    }

    fn resolve_alpha0(&self, curves: &EffectCurveGrid) -> f64 {
        if let Some(a) = self.alpha0 {
            return a;
        }
        let span: f64 = (0..curves.n_samples())
            .map(|i| {
                let r = curves.row(i);
                let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .sum();
        if span > 0.0 {
            10.0 / span
        } else {
            1.0
        }
    }
}

/// Selection probabilities `exp(alpha (w_j - max w)) / sum_k exp(alpha (w_k - max w))`.
pub fn softmax_probabilities(w: &[f64], alpha: f64) -> Vec<f64> {
    let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|&v| (alpha * (v - top)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn first_argmax(values: &[f64]) -> usize {
    crate::nuisance::argmax(values.iter().copied())
}

/// Grid index maximizing the summed curves of `subset`; ties go to the
/// smallest dose.
pub fn optimize_leaf_index(subset: &[usize], curves: &EffectCurveGrid) -> Result<usize> {
    if subset.is_empty() {
        return Err(Error::EmptyNode);
    }
    let sums = column_sums(subset, curves);
    Ok(first_argmax(&sums))
}

pub fn optimize_leaf(subset: &[usize], curves: &EffectCurveGrid) -> Result<f64> {
    Ok(curves.grid().points()[optimize_leaf_index(subset, curves)?])
}

fn column_sums(subset: &[usize], curves: &EffectCurveGrid) -> Vec<f64> {
    let mut sums = vec![0.0; curves.grid().len()];
    for &i in subset {
        for (s, v) in sums.iter_mut().zip(curves.row(i)) {
            *s += v;
        }
    }
    sums
}

/// Best split for one feature at an internal node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureCandidate {
    pub rule: SplitRule,
    /// Surrogate objective `W` of the node under this rule.
    pub w: f64,
}

/// Result of sweeping all features at one internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSweep {
    /// Best admissible rule per feature; `None` when every threshold of the
    /// feature would leave a nonempty leaf under the minimum size.
    pub candidates: Vec<Option<FeatureCandidate>>,
    /// `W` under the node's current rule.
    pub current_w: f64,
    /// Whether the current rule respects the minimum leaf size.
    pub current_ok: bool,
    pub n_members: usize,
}

/// Covariates, curves and per-feature sort orders shared by every update.
pub struct TaoProblem<'a> {
    curves: &'a EffectCurveGrid,
    x: &'a Array2<f64>,
    order: Vec<Vec<usize>>,
    /// Node updates never create a nonempty leaf smaller than this.
    min_leaf: usize,
}

impl<'a> TaoProblem<'a> {
    pub fn new(curves: &'a EffectCurveGrid, x: &'a Array2<f64>) -> Result<Self> {
        if curves.n_samples() != x.nrows() {
            return Err(Error::Shape {
                expected: x.nrows(),
                got: curves.n_samples(),
            });
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidData("no covariates to split on".into()));
        }
        let x_ok = x.is_standard_layout();
        if !x_ok {
            return Err(Error::InvalidData("covariates must be row-major".into()));
        }
        let order = (0..x.ncols())
            .map(|k| {
                let mut idx: Vec<usize> = (0..x.nrows()).collect();
                idx.sort_by(|&a, &b| x[[a, k]].total_cmp(&x[[b, k]]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(Self {
            curves,
            x,
            order,
            min_leaf: 0,
        })
    }

    pub fn with_min_leaf(mut self, min_leaf: usize) -> Self {
        self.min_leaf = min_leaf;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        let p = self.x.ncols();
        &self.x.as_slice().expect("standard layout")[i * p..(i + 1) * p]
    }
}

/// Complete binary tree in heap order: internal node `k` has children
/// `2k + 1` and `2k + 2`; heap ids at or beyond `2^h - 1` are leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteTree {
    height: usize,
    rules: Vec<SplitRule>,
    leaf_doses: Vec<usize>,
}

fn depth_of(k: usize) -> usize {
    (usize::BITS - 1 - (k + 1).leading_zeros()) as usize
}

impl CompleteTree {
    pub fn new(height: usize, rules: Vec<SplitRule>, leaf_doses: Vec<usize>) -> Result<Self> {
        if rules.len() != (1 << height) - 1 || leaf_doses.len() != 1 << height {
            return Err(Error::Shape {
                expected: (1 << height) - 1,
                got: rules.len(),
            });
        }
        Ok(Self {
            height,
            rules,
            leaf_doses,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rules(&self) -> &[SplitRule] {
        &self.rules
    }

    /// Grid indices of the leaf doses, left to right.
    pub fn leaf_doses(&self) -> &[usize] {
        &self.leaf_doses
    }

    fn n_internal(&self) -> usize {
        self.rules.len()
    }

    /// Leaf slot reached by `x` starting at heap node `k`.
    #[inline]
    fn leaf_from(&self, mut k: usize, x: &[f64]) -> usize {
        let ni = self.n_internal();
        while k < ni {
            k = if self.rules[k].goes_left(x) {
                2 * k + 1
            } else {
                2 * k + 2
            };
        }
        k - ni
    }

    pub fn leaf_of(&self, x: &[f64]) -> usize {
        self.leaf_from(0, x)
    }

    /// Samples routed through heap node `k`, in index order.
    fn members(&self, k: usize, prob: &TaoProblem<'_>) -> Vec<usize> {
        let target_depth = depth_of(k);
        (0..prob.n_samples())
            .filter(|&i| {
                let x = prob.row(i);
                let mut m = 0;
                for _ in 0..target_depth {
                    m = if self.rules[m].goes_left(x) {
                        2 * m + 1
                    } else {
                        2 * m + 2
                    };
                }
                m == k
            })
            .collect()
    }

    pub fn objective(&self, prob: &TaoProblem<'_>) -> f64 {
        (0..prob.n_samples())
            .map(|i| {
                prob.curves
                    .value(i, self.leaf_doses[self.leaf_of(prob.row(i))])
            })
            .sum()
    }

    /// Sweeps every feature at internal node `k` with both subtrees fixed.
    ///
    /// For each sample the gain of going left (`theta_i` at the left
    /// subtree's dose) and right are fixed, so `W` for every threshold of a
    /// feature follows from one prefix sum along that feature's sort order.
    /// Candidate thresholds are midpoints between consecutive distinct
    /// values, plus the two one-sided partitions.
    pub fn sweep_node(&self, k: usize, prob: &TaoProblem<'_>) -> NodeSweep {
        assert!(k < self.n_internal(), "node {k} is not internal");
        let members = self.members(k, prob);
        let n = prob.n_samples();
        let mut in_node = vec![false; n];
        let mut diff = vec![0.0; n];
        let mut slots = vec![(0usize, 0usize); n];
        let mut base = vec![0usize; self.leaf_doses.len()];
        let mut current = vec![0usize; self.leaf_doses.len()];
        let mut total_right = 0.0;
        let mut current_w = 0.0;
        for &i in &members {
            let x = prob.row(i);
            let (sl, sr) = (self.leaf_from(2 * k + 1, x), self.leaf_from(2 * k + 2, x));
            let gl = prob.curves.value(i, self.leaf_doses[sl]);
            let gr = prob.curves.value(i, self.leaf_doses[sr]);
            in_node[i] = true;
            diff[i] = gl - gr;
            slots[i] = (sl, sr);
            base[sr] += 1;
            total_right += gr;
            if self.rules[k].goes_left(x) {
                current_w += gl;
                current[sl] += 1;
            } else {
                current_w += gr;
                current[sr] += 1;
            }
        }
        let m = prob.min_leaf;
        let small = |c: usize| c > 0 && c < m;
        let base_bad = base.iter().filter(|&&c| small(c)).count();
        let current_ok = !current.iter().any(|&c| small(c));
        let mut candidates = Vec::with_capacity(prob.n_features());
        let mut seq = Vec::with_capacity(members.len());
        for (j, order) in prob.order.iter().enumerate() {
            seq.clear();
            seq.extend(order.iter().copied().filter(|&i| in_node[i]));
            let value = |i: usize| prob.x[[i, j]];
            let mut best: Option<FeatureCandidate> = None;
            let mut running = total_right;
            let mut counts = base.clone();
            let mut bad = base_bad;
            for pos in 0..seq.len() {
                let i = seq[pos];
                running += diff[i];
                if m > 1 {
                    let (sl, sr) = slots[i];
                    for (slot, up) in [(sr, false), (sl, true)] {
                        let was = small(counts[slot]);
                        if up {
                            counts[slot] += 1;
                        } else {
                            counts[slot] -= 1;
                        }
                        match (was, small(counts[slot])) {
                            (true, false) => bad -= 1,
                            (false, true) => bad += 1,
                            _ => {}
                        }
                    }
                }
                if pos + 1 < seq.len() {
                    let (a, b) = (value(seq[pos]), value(seq[pos + 1]));
                    if a < b && bad == 0 && best.is_none_or(|c| running > c.w) {
                        let mut mid = 0.5 * (a + b);
                        if mid >= b {
                            mid = a;
                        }
                        best = Some(FeatureCandidate {
                            rule: SplitRule {
                                feature: j,
                                threshold: mid,
                            },
                            w: running,
                        });
                    }
                }
            }
            if let (Some(&first), Some(&last)) = (seq.first(), seq.last()) {
                let all_right = FeatureCandidate {
                    rule: SplitRule {
                        feature: j,
                        threshold: value(first).next_down(),
                    },
                    w: total_right,
                };
                let all_left = FeatureCandidate {
                    rule: SplitRule {
                        feature: j,
                        threshold: value(last),
                    },
                    w: running,
                };
                for (c, ok) in [(all_right, base_bad == 0), (all_left, bad == 0)] {
                    if ok && best.is_none_or(|b| c.w > b.w) {
                        best = Some(c);
                    }
                }
            }
            candidates.push(best);
        }
        NodeSweep {
            candidates,
            current_w,
            current_ok,
            n_members: members.len(),
        }
    }

    /// Re-fits internal node `k`. With `alpha = None` the best feature wins
    /// (smallest index on ties) and the rule only changes on a strict
    /// improvement; otherwise the feature is drawn from the softmax over the
    /// per-feature winners. Returns `None` when the node has fewer than two
    /// members and is left frozen.
    pub fn optimize_internal_node(
        &mut self,
        k: usize,
        prob: &TaoProblem<'_>,
        alpha: Option<f64>,
        rng: &mut impl Rng,
    ) -> Option<bool> {
        let sweep = self.sweep_node(k, prob);
        if sweep.n_members < 2 {
            return None;
        }
        let admissible: Vec<FeatureCandidate> =
            sweep.candidates.iter().flatten().copied().collect();
        if admissible.is_empty() {
            return Some(false);
        }
        let ws: Vec<f64> = admissible.iter().map(|c| c.w).collect();
        let chosen = match alpha {
            None => {
                let j = first_argmax(&ws);
                let tol = 1e-10 * (1.0 + sweep.current_w.abs());
                if ws[j] > sweep.current_w + tol {
                    admissible[j].rule
                } else {
                    self.rules[k]
                }
            }
            Some(a) => {
                let probs = softmax_probabilities(&ws, a);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut j = probs.len() - 1;
                for (idx, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        j = idx;
                        break;
                    }
                }
                admissible[j].rule
            }
        };
        let changed = chosen != self.rules[k];
        self.rules[k] = chosen;
        Some(changed)
    }

    /// Re-optimizes every leaf dose; a dose only moves on a strict improvement.
    pub fn optimize_leaves(&mut self, prob: &TaoProblem<'_>) -> bool {
        let mut members = vec![Vec::new(); self.leaf_doses.len()];
        for i in 0..prob.n_samples() {
            members[self.leaf_of(prob.row(i))].push(i);
        }
        let mut changed = false;
        for (slot, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let sums = column_sums(m, prob.curves);
            let best = first_argmax(&sums);
            let cur = self.leaf_doses[slot];
            if sums[best] > sums[cur] + 1e-10 * (1.0 + sums[cur].abs()) {
                self.leaf_doses[slot] = best;
                changed = true;
            }
        }
        changed
    }

    /// Greedy top-down initialization on the same objective: each split
    /// maximizes the best single-dose value of its two halves.
    pub fn greedy(height: usize, prob: &TaoProblem<'_>) -> Self {
        let ni = (1 << height) - 1;
        let mut rules = vec![fallback_rule(prob); ni];
        let mut leaf_doses = vec![0; 1 << height];
        let all: Vec<usize> = (0..prob.n_samples()).collect();
        let root_dose = first_argmax(&column_sums(&all, prob.curves));
        let mut stack = vec![(0usize, all, root_dose)];
        while let Some((k, members, inherited)) = stack.pop() {
            let dose = if members.is_empty() {
                inherited
            } else {
                first_argmax(&column_sums(&members, prob.curves))
            };
            if k >= ni {
                leaf_doses[k - ni] = dose;
                continue;
            }
            if let Some(rule) = greedy_split(&members, prob) {
                rules[k] = rule;
            }
            let (l, r): (Vec<usize>, Vec<usize>) = members
                .iter()
                .partition(|&&i| rules[k].goes_left(prob.row(i)));
            stack.push((2 * k + 1, l, dose));
            stack.push((2 * k + 2, r, dose));
        }
        Self {
            height,
            rules,
            leaf_doses,
        }
    }

    /// Random feature per node, threshold at a random member's value; leaves
    /// start at their best dose.
    pub fn random(height: usize, prob: &TaoProblem<'_>, rng: &mut impl Rng) -> Self {
        let ni = (1 << height) - 1;
        let mut rules = vec![fallback_rule(prob); ni];
        let mut leaf_doses = vec![0; 1 << height];
        let all: Vec<usize> = (0..prob.n_samples()).collect();
        let root_dose = first_argmax(&column_sums(&all, prob.curves));
        // Breadth-first so the random draws follow a fixed node order.
        let mut queue = std::collections::VecDeque::from([(0usize, all, root_dose)]);
        while let Some((k, members, inherited)) = queue.pop_front() {
            let dose = if members.is_empty() {
                inherited
            } else {
                first_argmax(&column_sums(&members, prob.curves))
            };
            if k >= ni {
                leaf_doses[k - ni] = dose;
                continue;
            }
            // Thresholds leaving either side nonempty and under the minimum
            // are redrawn a few times before falling back to all-left.
            let m = prob.min_leaf;
            for _ in 0..RANDOM_RULE_TRIES {
                let feature = rng.random_range(0..prob.n_features());
                let pool = if members.is_empty() {
                    prob.n_samples()
                } else {
                    members.len()
                };
                let pick = rng.random_range(0..pool);
                let src = if members.is_empty() {
                    pick
                } else {
                    members[pick]
                };
                let rule = SplitRule {
                    feature,
                    threshold: prob.x[[src, feature]],
                };
                let left = members
                    .iter()
                    .filter(|&&i| rule.goes_left(prob.row(i)))
                    .count();
                let right = members.len() - left;
                if [left, right].iter().all(|&c| c == 0 || c >= m) {
                    rules[k] = rule;
                    break;
                }
            }
            let (l, r): (Vec<usize>, Vec<usize>) = members
                .iter()
                .partition(|&&i| rules[k].goes_left(prob.row(i)));
            queue.push_back((2 * k + 1, l, dose));
            queue.push_back((2 * k + 2, r, dose));
        }
        Self {
            height,
            rules,
            leaf_doses,
        }
    }

    /// Arena form with leaf doses on the grid and occupancy counts.
    pub fn to_dose_tree(&self, prob: &TaoProblem<'_>) -> DoseTree {
        let grid = prob.curves.grid().points();
        let ni = self.n_internal();
        let total = 2 * ni + 1;
        let nodes: Vec<Node> = (0..total)
            .map(|k| {
                if k < ni {
                    Node::Split {
                        rule: self.rules[k],
                        left: 2 * k + 1,
                        right: 2 * k + 2,
                    }
                } else {
                    Node::Leaf {
                        dose: grid[self.leaf_doses[k - ni]],
                        n_samples: 0,
                    }
                }
            })
            .collect();
        DoseTree::from_nodes(nodes)
            .expect("complete heap is a valid tree")
            .with_leaf_counts(prob.x)
    }
}

const RANDOM_RULE_TRIES: usize = 20;

/// Rule sending every training sample left.
fn fallback_rule(prob: &TaoProblem<'_>) -> SplitRule {
    let hi = prob
        .x
        .column(0)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    SplitRule {
        feature: 0,
        threshold: hi,
    }
}

fn greedy_split(members: &[usize], prob: &TaoProblem<'_>) -> Option<SplitRule> {
    if members.len() < 2 {
        return None;
    }
    let g = prob.curves.grid().len();
    let total = column_sums(members, prob.curves);
    let mut in_node = vec![false; prob.n_samples()];
    for &i in members {
        in_node[i] = true;
    }
    let mut best: Option<(f64, SplitRule)> = None;
    let mut seq = Vec::with_capacity(members.len());
    let mut cum = vec![0.0; g];
    let m = prob.min_leaf.max(1);
    for (j, order) in prob.order.iter().enumerate() {
        seq.clear();
        seq.extend(order.iter().copied().filter(|&i| in_node[i]));
        cum.iter_mut().for_each(|c| *c = 0.0);
        for pos in 0..seq.len() - 1 {
            for (c, v) in cum.iter_mut().zip(prob.curves.row(seq[pos])) {
                *c += v;
            }
            let (a, b) = (prob.x[[seq[pos], j]], prob.x[[seq[pos + 1], j]]);
            if a >= b || pos + 1 < m || seq.len() - pos - 1 < m {
                continue;
            }
            let left = cum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let right = total
                .iter()
                .zip(&cum)
                .map(|(t, c)| t - c)
                .fold(f64::NEG_INFINITY, f64::max);
            let v = left + right;
            if best.is_none_or(|(bv, _)| v > bv) {
                let mut mid = 0.5 * (a + b);
                if mid >= b {
                    mid = a;
                }
                best = Some((
                    v,
                    SplitRule {
                        feature: j,
                        threshold: mid,
                    },
                ));
            }
        }
    }
    best.map(|(_, r)| r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Greedy,
    Random,
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartSummary {
    pub init: InitKind,
    pub cycles: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Objective after each full cycle.
    pub trace: Vec<f64>,
    /// Objective after every node update, when recorded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub updates: Option<Vec<f64>>,
    pub frozen_updates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneAction {
    /// Parent of the undersized leaf, in the arena at the time of the action.
    pub collapsed_node: usize,
    /// Occupancy of the undersized leaf that triggered the collapse.
    pub undersized_leaf_samples: usize,
    /// Dose of the collapsed parent; `None` when the sibling subtree took
    /// the parent's place instead.
    pub new_dose: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaoDiagnostics {
    pub alpha0: f64,
    pub deterministic: bool,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    pub objective_before_prune: f64,
    pub objective_after_prune: f64,
    pub min_leaf: usize,
    pub pruning: Vec<PruneAction>,
}

fn run_restart(
    mut tree: CompleteTree,
    init: InitKind,
    prob: &TaoProblem<'_>,
    cfg: &TaoConfig,
    schedule: &AnnealSchedule,
    alpha0: f64,
    rng: &mut ChaCha8Rng,
) -> (CompleteTree, RestartSummary) {
    let h = tree.height;
    let mut updates = cfg.record_updates.then(Vec::new);
    let mut frozen = 0usize;
    let initial = tree.objective(prob);
    if let Some(u) = updates.as_mut() {
        u.push(initial);
    }
    let mut prev = initial;
    let mut trace = Vec::new();
    let mut stable_obj = 0;
    let mut stable_tree = 0;
    let mut best = (initial, tree.clone());
    let mut t = 0;

    let sweep_levels = |tree: &mut CompleteTree,
                        levels: &mut dyn Iterator<Item = usize>,
                        alpha: Option<f64>,
                        rng: &mut ChaCha8Rng,
                        updates: &mut Option<Vec<f64>>,
                        frozen: &mut usize| {
        for d in levels {
            for k in (1 << d) - 1..(1 << (d + 1)) - 1 {
                if tree.optimize_internal_node(k, prob, alpha, rng).is_none() {
                    *frozen += 1;
                }
                if let Some(u) = updates.as_mut() {
                    u.push(tree.objective(prob));
                }
            }
        }
    };

    while t < cfg.max_sweeps {
        t += 1;
        let before = tree.clone();
        let alpha = (!schedule.deterministic).then(|| AnnealSchedule::alpha(alpha0, t));
        sweep_levels(
            &mut tree,
            &mut (0..h),
            alpha,
            rng,
            &mut updates,
            &mut frozen,
        );
        tree.optimize_leaves(prob);
        if let Some(u) = updates.as_mut() {
            u.push(tree.objective(prob));
        }
        sweep_levels(
            &mut tree,
            &mut (0..h).rev(),
            alpha,
            rng,
            &mut updates,
            &mut frozen,
        );
        // Leaves are re-fit once more so the tree ends each cycle with
        // optimal doses for its final splits.
        tree.optimize_leaves(prob);
        let obj = tree.objective(prob);
        if let Some(u) = updates.as_mut() {
            u.push(obj);
        }
        trace.push(obj);
        if obj > best.0 {
            best = (obj, tree.clone());
        }
        let rel = (obj - prev).abs() / prev.abs().max(1e-12);
        stable_obj = if rel < cfg.tol { stable_obj + 1 } else { 0 };
        stable_tree = if tree == before { stable_tree + 1 } else { 0 };
        prev = obj;
        if stable_obj >= 2 || stable_tree >= 2 {
            break;
        }
    }

    if !schedule.deterministic {
        // Finish from the best tree visited with greedy (zero-temperature)
        // cycles so the result is a local optimum.
        tree = best.1;
        let mut last = best.0;
        for _ in 0..cfg.max_sweeps {
            let before = tree.clone();
            sweep_levels(&mut tree, &mut (0..h), None, rng, &mut updates, &mut frozen);
            tree.optimize_leaves(prob);
            sweep_levels(
                &mut tree,
                &mut (0..h).rev(),
                None,
                rng,
                &mut updates,
                &mut frozen,
            );
            tree.optimize_leaves(prob);
            let obj = tree.objective(prob);
            trace.push(obj);
            let rel = (obj - last).abs() / last.abs().max(1e-12);
            last = obj;
            if tree == before || rel < cfg.tol {
                break;
            }
        }
    }

    let final_objective = tree.objective(prob);
    let summary = RestartSummary {
        init,
        cycles: t,
        initial_objective: initial,
        final_objective,
        trace,
        updates,
        frozen_updates: frozen,
    };
    (tree, summary)
}

/// Fits a dose tree maximizing `sum_i theta_i(g(x_i))`.
pub fn tao_fit(
    curves: &EffectCurveGrid,
    x: &Array2<f64>,
    cfg: &TaoConfig,
    schedule: &AnnealSchedule,
) -> Result<(DoseTree, TaoDiagnostics)> {
    cfg.validate()?;
    let x = x.as_standard_layout().into_owned();
    let min_leaf = cfg.min_leaf_for(x.nrows());
    let prob =
        TaoProblem::new(curves, &x)?.with_min_leaf(if cfg.constrain_leaves { min_leaf } else { 0 });
    let alpha0 = schedule.resolve_alpha0(curves);
    let results: Vec<(DoseTree, Vec<PruneAction>, f64, RestartSummary)> = (0..=cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let (init, kind) = if r == 0 {
                (CompleteTree::greedy(cfg.height, &prob), InitKind::Greedy)
            } else {
                (
                    CompleteTree::random(cfg.height, &prob, &mut rng),
                    InitKind::Random,
                )
            };
            let (tree, summary) = run_restart(init, kind, &prob, cfg, schedule, alpha0, &mut rng);
            let (pruned, actions) = prune(&tree.to_dose_tree(&prob), curves, &x, min_leaf)?;
            let after = objective(&pruned, curves, &x);
            Ok((pruned, actions, after, summary))
        })
        .collect::<Result<_>>()?;
    // Restarts compete on the pruned objective.
    let mut best_idx = 0;
    for (r, res) in results.iter().enumerate() {
        if res.2 > results[best_idx].2 {
            best_idx = r;
        }
    }
    let before = results[best_idx].3.final_objective;
    let mut restarts = Vec::with_capacity(results.len());
    let mut best = None;
    for (r, (tree, actions, after, summary)) in results.into_iter().enumerate() {
        if r == best_idx {
            best = Some((tree, actions, after));
        }
        restarts.push(summary);
    }
    let (pruned, actions, after) = best.expect("at least one restart");
    let diag = TaoDiagnostics {
        alpha0,
        deterministic: schedule.deterministic,
        best_restart: best_idx,
        restarts,
        objective_before_prune: before,
        objective_after_prune: after,
        min_leaf,
        pruning: actions,
    };
    Ok((pruned, diag))
}

/// Collapses leaves with fewer than `min_leaf` training samples. The first
/// such leaf (preorder) is merged with its sibling: the parent becomes a leaf
/// with its dose re-fit on the parent's members, or, when the sibling is a
/// subtree and doing so scores higher, the sibling subtree replaces the
/// parent and absorbs the leaf's samples. Repeats until every leaf is large
/// enough or only the root remains.
pub fn prune(
    tree: &DoseTree,
    curves: &EffectCurveGrid,
    x: &Array2<f64>,
    min_leaf: usize,
) -> Result<(DoseTree, Vec<PruneAction>)> {
    let mut tree = tree.compacted().with_leaf_counts(x);
    let mut actions = Vec::new();
    loop {
        let members = tree.node_members(x);
        let mut parent = vec![usize::MAX; tree.nodes().len()];
        for (id, node) in tree.nodes().iter().enumerate() {
            if let Node::Split { left, right, .. } = node {
                parent[*left] = id;
                parent[*right] = id;
            }
        }
        let small = tree
            .leaf_ids()
            .into_iter()
            .find(|&id| id != 0 && members[id].len() < min_leaf);
        let Some(leaf) = small else { break };
        let p = parent[leaf];
        let sibling = match tree.nodes()[p] {
            Node::Split { left, right, .. } => {
                if left == leaf {
                    right
                } else {
                    left
                }
            }
            Node::Leaf { .. } => unreachable!(),
        };
        let dose = match optimize_leaf(&members[p], curves) {
            Ok(d) => d,
            Err(Error::EmptyNode) => match tree.nodes()[leaf] {
                Node::Leaf { dose, .. } => dose,
                Node::Split { .. } => unreachable!(),
            },
            Err(e) => return Err(e),
        };
        let mut collapsed = tree.clone();
        collapsed.nodes_mut()[p] = Node::Leaf {
            dose,
            n_samples: members[p].len(),
        };
        let collapsed = collapsed.compacted();
        let mut next = collapsed;
        let mut new_dose = Some(dose);
        if matches!(tree.nodes()[sibling], Node::Split { .. }) {
            let mut promoted = tree.clone();
            promoted.nodes_mut()[p] = tree.nodes()[sibling].clone();
            let promoted = refit_leaves(promoted.compacted(), curves, x);
            if objective(&promoted, curves, x) > objective(&next, curves, x) {
                next = promoted;
                new_dose = None;
            }
        }
        actions.push(PruneAction {
            collapsed_node: p,
            undersized_leaf_samples: members[leaf].len(),
            new_dose,
        });
        tree = next;
    }
    Ok((tree.with_leaf_counts(x), actions))
}

/// Moves each nonempty leaf to its best dose when that strictly improves it.
fn refit_leaves(mut tree: DoseTree, curves: &EffectCurveGrid, x: &Array2<f64>) -> DoseTree {
    let members = tree.node_members(x);
    let grid = curves.grid();
    for id in tree.leaf_ids() {
        if members[id].is_empty() {
            continue;
        }
        let sums = column_sums(&members[id], curves);
        let best = first_argmax(&sums);
        if let Node::Leaf { dose, .. } = &mut tree.nodes_mut()[id] {
            let cur = grid.nearest_index(*dose);
            if sums[best] > sums[cur] + 1e-10 * (1.0 + sums[cur].abs()) {
                *dose = grid.points()[best];
            }
        }
    }
    tree
}
