//! Simulation scenarios with known optimal rules, policy evaluation, and the
//! greedy-CART and random-dose baselines.
//!
//! Scenario 1 and 2 are single-stage; 3 and 4 are two-stage with history
//! `H_2 = (X, A_1, Y_1, Z)`. Smaller outcomes are better in all four.

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Direction, StageData};
use crate::dtr::{fit_dtr, DtrConfig, Policy, StageLearner};
use crate::effectcurve::DoseGrid;
use crate::error::{Error, Result};
use crate::nuisance::{greedy_doses, OutcomeMean, RegressionTree, TreeNode, TreeParams};
use crate::tao::{DoseTree, Node, SplitRule};

/// Scale of `c(x, a)` in scenario 1, set so that random dosing has a regret
/// of about 4.5.
pub const DEFAULT_C0: f64 = 7.28;

/// How the "0.1" noise level of scenarios 3 and 4 is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: usize,
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default)]
    pub noise: NoiseConvention,
}

fn default_c0() -> f64 {
    DEFAULT_C0
}

impl ScenarioSpec {
    pub fn new(id: usize, n: usize, p: usize, seed: u64) -> Result<Self> {
        let s = Self {
            id,
            n,
            p,
            seed,
            c0: DEFAULT_C0,
            noise: NoiseConvention::Variance,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.id) {
            return Err(Error::Config(format!("unknown scenario {}", self.id)));
        }
        if self.p < 2 {
            return Err(Error::Config("scenarios need at least 2 covariates".into()));
        }
        if self.n < 1 {
            return Err(Error::Config(
                "scenario sample size must be positive".into(),
            ));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::Config("c0 must be positive".into()));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        if self.id >= 3 {
            2
        } else {
            1
        }
    }

    /// Length of the history vector at stage `t`.
    pub fn history_len(&self, t: usize) -> usize {
        if t == 1 {
            self.p
        } else {
            2 * self.p + 2
        }
    }

    pub fn direction(&self) -> Direction {
        Direction::Minimize
    }

    /// `tau_p = sqrt(60 / p)`, giving `var u(X) = 5` (scenario 1).
    pub fn tau_p(&self) -> f64 {
        (60.0 / self.p as f64).sqrt()
    }

    /// `k_p = -c0 - tau_p p / 2`, giving `E u(X) = -c0 = -E sup_a c` (scenario 1).
    pub fn k_p(&self) -> f64 {
        -self.c0 - self.tau_p() * self.p as f64 / 2.0
    }

    /// Stage weights `(rho_1, rho_2)` of scenarios 3 and 4.
    pub fn rho(&self) -> (f64, f64) {
        match self.id {
            3 => (1.0, 2.0),
            4 => (2.0, 10.0),
            _ => (0.0, 0.0),
        }
    }

    pub fn noise_sd(&self) -> f64 {
        match (self.id, self.noise) {
            (1 | 2, _) => 1.0,
            (_, NoiseConvention::Variance) => 0.1f64.sqrt(),
            (_, NoiseConvention::StdDev) => 0.1,
        }
    }

    fn covariate_range(&self) -> (f64, f64) {
        if self.id == 1 {
            (0.0, 1.0)
        } else {
            (-1.0, 1.0)
        }
    }

    /// `c(x, a) = c0 / (1 + 10 (2a - x1 - x2)^2)` (scenario 1).
    pub fn c(&self, x: &[f64], a: f64) -> f64 {
        let d = 2.0 * a - x[0] - x[1];
        self.c0 / (1.0 + 10.0 * d * d)
    }

    /// `u(x) = k_p + tau_p sum x` (scenario 1).
    pub fn u(&self, x: &[f64]) -> f64 {
        self.k_p() + self.tau_p() * x.iter().sum::<f64>()
    }
}

/// Optimal dose at stage `t` for history `h`.
pub fn true_optimal_dose(spec: &ScenarioSpec, t: usize, h: &[f64]) -> f64 {
    let p = spec.p;
    match (spec.id, t) {
        (1, _) => (h[0] + h[1]) / 2.0,
        (2, _) => {
            if h[0] * h[1] >= 0.0 {
                0.75
            } else {
                0.25
            }
        }
        (_, 1) => 0.5 + (h[0] + h[1]) / 4.0,
        (3, _) => 0.5 + (h[p + 1] + h[p + 2]) / 4.0,
        _ => {
            let (y1, z1) = (h[p + 1], h[p + 2]);
            if z1 * (y1 - 0.1) > 0.0 {
                0.2
            } else {
                0.8
            }
        }
    }
}

/// Noiseless stage-`t` outcome mean at history `h` and dose `a`.
pub fn mean_outcome(spec: &ScenarioSpec, t: usize, h: &[f64], a: f64) -> f64 {
    let p = spec.p;
    let opt = true_optimal_dose(spec, t, h);
    match (spec.id, t) {
        (1, _) => spec.u(h) - spec.c(h, a),
        (2, _) => h.iter().sum::<f64>() / p as f64 + 100.0 * (a - opt).powi(2),
        (_, 1) => h.iter().sum::<f64>() / p as f64 + spec.rho().0 * (a - opt).powi(2),
        _ => {
            let z = &h[p + 2..];
            z.iter().sum::<f64>() / p as f64 + spec.rho().1 * (a - opt).powi(2)
        }
    }
}

fn draw_covariates(spec: &ScenarioSpec, rng: &mut impl Rng) -> Vec<f64> {
    let (lo, hi) = spec.covariate_range();
    (0..spec.p).map(|_| rng.random_range(lo..hi)).collect()
}

fn feature_names(p: usize) -> Vec<String> {
    (1..=p).map(|k| format!("x{k}")).collect()
}

/// A generated training set.
#[derive(Debug, Clone)]
pub enum Generated {
    Single(Dataset),
    Multi(StageData),
}

impl Generated {
    pub fn into_stage_data(self) -> Result<StageData> {
        match self {
            Generated::Single(ds) => StageData::new(vec![ds]),
            Generated::Multi(sd) => Ok(sd),
        }
    }

    pub fn single(&self) -> Option<&Dataset> {
        match self {
            Generated::Single(ds) => Some(ds),
            Generated::Multi(_) => None,
        }
    }
}

/// Draws `spec.n` samples with uniformly random doses, seeded by `spec.seed`.
pub fn generate(spec: &ScenarioSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd()).expect("positive sd");
    let (n, p) = (spec.n, spec.p);
    let names = feature_names(p);
    if spec.n_stages() == 1 {
        let mut x = Array2::zeros((n, p));
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let xi = draw_covariates(spec, &mut rng);
            let ai: f64 = rng.random();
            let yi = mean_outcome(spec, 1, &xi, ai) + noise.sample(&mut rng);
            for k in 0..p {
                x[[i, k]] = xi[k];
            }
            a.push(ai);
            y.push(yi);
        }
        return Ok(Generated::Single(Dataset::new(
            x,
            a,
            y,
            names,
            spec.direction(),
        )?));
    }
    let mut x = Array2::zeros((n, p));
    let mut z = Array2::zeros((n, p));
    let (mut a1, mut a2, mut y1, mut y2) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let xi = draw_covariates(spec, &mut rng);
        let ai1: f64 = rng.random();
        let yi1 = mean_outcome(spec, 1, &xi, ai1) + noise.sample(&mut rng);
        let zi = draw_covariates(spec, &mut rng);
        let ai2: f64 = rng.random();
        let h2 = stage2_history(&xi, ai1, yi1, &zi);
        let yi2 = mean_outcome(spec, 2, &h2, ai2) + noise.sample(&mut rng);
        for k in 0..p {
            x[[i, k]] = xi[k];
            z[[i, k]] = zi[k];
        }
        a1.push(ai1);
        a2.push(ai2);
        y1.push(yi1);
        y2.push(yi2);
    }
    let s1 = Dataset::new(x, a1, y1, names.clone(), spec.direction())?;
    let s2 = Dataset::new(z, a2, y2, names, spec.direction())?;
    Ok(Generated::Multi(StageData::new(vec![s1, s2])?))
}

fn stage2_history(x: &[f64], a1: f64, y1: f64, z: &[f64]) -> Vec<f64> {
    let mut h = Vec::with_capacity(2 * x.len() + 2);
    h.extend_from_slice(x);
    h.push(a1);
    h.push(y1);
    h.extend_from_slice(z);
    h
}

/// A dose rule evaluated stage by stage on a growing history.
pub trait DosePolicy: Sync {
    fn n_stages(&self) -> usize;

    /// Dose at stage `t` (1-based) given `H_t`.
    fn dose(&self, t: usize, history: &[f64], rng: &mut dyn RngCore) -> f64;
}

impl DosePolicy for Policy {
    fn n_stages(&self) -> usize {
        Policy::n_stages(self)
    }

    fn dose(&self, t: usize, history: &[f64], _rng: &mut dyn RngCore) -> f64 {
        self.stage_dose(t, history)
            .expect("evaluation builds histories of the policy's width")
    }
}

/// The generator's own optimal rule.
#[derive(Debug, Clone)]
pub struct OraclePolicy(pub ScenarioSpec);

impl DosePolicy for OraclePolicy {
    fn n_stages(&self) -> usize {
        self.0.n_stages()
    }

    fn dose(&self, t: usize, history: &[f64], _rng: &mut dyn RngCore) -> f64 {
        true_optimal_dose(&self.0, t, history)
    }
}

/// Independent `U(0, 1)` doses.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    n_stages: usize,
}

impl RandomPolicy {
    /// Draws `n` doses from a stream seeded by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.dose(1, &[], &mut rng)).collect()
    }
}

impl DosePolicy for RandomPolicy {
    fn n_stages(&self) -> usize {
        self.n_stages
    }

    fn dose(&self, _t: usize, _history: &[f64], rng: &mut dyn RngCore) -> f64 {
        // 53 random bits, as `Rng::random::<f64>` does.
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Random dosing for `spec`'s stage count. The randomness comes from the
/// stream handed to `DosePolicy::dose`, so results are fixed by the
/// evaluation seed.
pub fn baseline_random(spec: &ScenarioSpec) -> RandomPolicy {
    RandomPolicy {
        n_stages: spec.n_stages(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartConfig {
    pub height: usize,
    /// Minimum leaf size; `None` means `max(10, n / 50)`.
    pub min_leaf: Option<usize>,
}

impl Default for CartConfig {
    fn default() -> Self {
        Self {
            height: 2,
            min_leaf: None,
        }
    }
}

/// Regression tree of height `h` on the per-sample greedy doses of `om`,
/// with leaf doses snapped to the grid.
pub fn baseline_cart(
    ds: &Dataset,
    om: &dyn OutcomeMean,
    grid: &DoseGrid,
    cfg: &CartConfig,
) -> Result<DoseTree> {
    let doses = greedy_doses(om, ds, grid);
    let min_leaf = cfg
        .min_leaf
        .unwrap_or_else(|| (ds.n_samples() / 50).max(10));
    let (tree, _) = RegressionTree::fit(
        ds.covariates(),
        &doses,
        TreeParams {
            max_depth: cfg.height,
            min_samples_leaf: min_leaf.max(1),
        },
    );
    let nodes = tree
        .nodes()
        .iter()
        .map(|n| match *n {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => Node::Split {
                rule: SplitRule { feature, threshold },
                left,
                right,
            },
            TreeNode::Leaf { value, n_samples } => Node::Leaf {
                dose: grid.points()[grid.nearest_index(value)],
                n_samples,
            },
        })
        .collect();
    DoseTree::from_nodes(nodes)
}

/// Outcome of one test draw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub regret: f64,
    /// Per-stage dose RMSE against the optimal rule.
    pub rmse: Vec<f64>,
}

/// Regret and per-stage RMSE of `policy` on `n_test` fresh draws.
pub fn evaluate_once(
    policy: &dyn DosePolicy,
    spec: &ScenarioSpec,
    n_test: usize,
    data_rng: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
) -> ReplicationResult {
    let noise = Normal::new(0.0, spec.noise_sd()).expect("positive sd");
    let stages = spec.n_stages();
    let mut regret = 0.0;
    let mut sq = vec![0.0; stages];
    for _ in 0..n_test {
        let x = draw_covariates(spec, data_rng);
        let a1 = policy.dose(1, &x, policy_rng);
        let o1 = true_optimal_dose(spec, 1, &x);
        sq[0] += (a1 - o1).powi(2);
        let mut r = mean_outcome(spec, 1, &x, a1) - mean_outcome(spec, 1, &x, o1);
        if stages == 2 {
            let e1 = noise.sample(data_rng);
            let z = draw_covariates(spec, data_rng);
            let y1 = mean_outcome(spec, 1, &x, a1) + e1;
            let h2 = stage2_history(&x, a1, y1, &z);
            let a2 = policy.dose(2, &h2, policy_rng);
            let o2 = true_optimal_dose(spec, 2, &h2);
            sq[1] += (a2 - o2).powi(2);
            r += mean_outcome(spec, 2, &h2, a2) - mean_outcome(spec, 2, &h2, o2);
        }
        regret += r;
    }
    let m = n_test.max(1) as f64;
    ReplicationResult {
        regret: regret / m,
        rmse: sq.into_iter().map(|s| (s / m).sqrt()).collect(),
    }
}

/// Means and standard deviations across replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub replications: usize,
    pub regret_mean: f64,
    pub regret_sd: f64,
    pub rmse_mean: Vec<f64>,
    pub rmse_sd: Vec<f64>,
    /// False when there is a single replication and the SDs are reported as 0.
    pub sd_defined: bool,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl EvalReport {
    pub fn from_results(results: &[ReplicationResult]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| Error::Config("no replications to summarize".into()))?;
        let regrets: Vec<f64> = results.iter().map(|r| r.regret).collect();
        let (regret_mean, regret_sd) = mean_sd(&regrets);
        let (rmse_mean, rmse_sd) = (0..first.rmse.len())
            .map(|t| mean_sd(&results.iter().map(|r| r.rmse[t]).collect::<Vec<_>>()))
            .unzip();
        Ok(Self {
            replications: results.len(),
            regret_mean,
            regret_sd,
            rmse_mean,
            rmse_sd,
            sd_defined: results.len() > 1,
        })
    }

    /// Standard error of the mean regret.
    pub fn regret_se(&self) -> f64 {
        self.regret_sd / (self.replications as f64).sqrt()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Evaluates a fixed policy on `replications` independent test sets.
pub fn evaluate(
    policy: &dyn DosePolicy,
    spec: &ScenarioSpec,
    n_test: usize,
    replications: usize,
    seed: u64,
) -> Result<EvalReport> {
    if policy.n_stages() != spec.n_stages() {
        return Err(Error::Shape {
            expected: spec.n_stages(),
            got: policy.n_stages(),
        });
    }
    let results: Vec<ReplicationResult> = (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let mut data = stream_rng(seed, 2 * r);
            let mut pol = stream_rng(seed, 2 * r + 1);
            evaluate_once(policy, spec, n_test, &mut data, &mut pol)
        })
        .collect();
    EvalReport::from_results(&results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "godotree")]
    GoDoTree,
    Cart,
    Random,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::GoDoTree => "GoDoTree",
            Method::Cart => "CART",
            Method::Random => "Random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: ScenarioSpec,
    pub replications: usize,
    pub n_test: usize,
    pub methods: Vec<Method>,
    pub dtr: DtrConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub report: EvalReport,
    /// Per-replication results in replication order.
    pub replications: Vec<ReplicationResult>,
}

/// Generate, fit and evaluate each method over independent replications.
/// Every method in a replication sees the same training and test data.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<MethodReport>> {
    cfg.scenario.validate()?;
    if cfg.replications == 0 {
        return Err(Error::Config("replications must be positive".into()));
    }
    if cfg.n_test == 0 {
        return Err(Error::Config("n_test must be positive".into()));
    }
    let spec = &cfg.scenario;
    let per_rep: Vec<Vec<ReplicationResult>> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<ReplicationResult>> {
            let mut seeds = stream_rng(spec.seed, r);
            let train_seed = seeds.next_u64();
            let test_seed = seeds.next_u64();
            let fit_seed = seeds.next_u64();
            let train_spec = ScenarioSpec {
                seed: train_seed,
                ..spec.clone()
            };
            let sd = generate(&train_spec)?.into_stage_data()?;
            let mut out = Vec::with_capacity(cfg.methods.len());
            for (m, method) in cfg.methods.iter().enumerate() {
                let fitted;
                let random;
                let policy: &dyn DosePolicy = match method {
                    Method::Random => {
                        random = baseline_random(spec);
                        &random
                    }
                    Method::GoDoTree | Method::Cart => {
                        let mut dcfg = cfg.dtr.clone();
                        dcfg.learner = if *method == Method::Cart {
                            StageLearner::Cart
                        } else {
                            StageLearner::GoDoTree
                        };
                        dcfg.pipeline = dcfg.pipeline.with_seed(fit_seed);
                        fitted = fit_dtr(&sd, &dcfg)?.0;
                        &fitted
                    }
                };
                let mut data = ChaCha8Rng::seed_from_u64(test_seed);
                let mut pol = stream_rng(test_seed, 1 + m as u64);
                out.push(evaluate_once(policy, spec, cfg.n_test, &mut data, &mut pol));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    cfg.methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let reps: Vec<ReplicationResult> = per_rep.iter().map(|r| r[m].clone()).collect();
            Ok(MethodReport {
                method,
                report: EvalReport::from_results(&reps)?,
                replications: reps,
            })
        })
        .collect()
}
