//! Multi-stage regimes by backward induction.
//!
//! Stage `T` is fit on the final reward. Each earlier stage regresses on
//! `R_t + Y~_t` (additive long-term outcome) or `Y~_t` alone (last-value
//! outcome), where `Y~_t` plugs the already fitted stage-`t+1` rule into the
//! stage-`t+1` outcome model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{
    history_names, history_row, standardize_doses, Dataset, Direction, DoseScaler, HistoryStep,
    StageData,
};
use crate::effectcurve::DoseGrid;
use crate::error::{Error, Result};
use crate::nuisance::{fit_outcome_model, OutcomeMean, OutcomeModel};
use crate::pipeline::{
    fit_single_stage, leaf_curves, LeafCurve, PipelineConfig, PipelineDiagnostics,
};
use crate::sim::{baseline_cart, CartConfig};
use crate::tao::DoseTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiKind {
    /// Long-term outcome `R_1 + ... + R_T`.
    #[default]
    Additive,
    /// Long-term outcome `R_T`.
    LastValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLearner {
    #[default]
    GoDoTree,
    /// Regression tree on per-sample greedy doses of the outcome model.
    Cart,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DtrConfig {
    pub pipeline: PipelineConfig,
    pub psi: PsiKind,
    pub learner: StageLearner,
}

/// One stage's rule. The tree works on standardized doses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePolicy {
    pub tree: DoseTree,
    pub scaler: DoseScaler,
    /// Column names of the history vector the tree consumes.
    pub feature_names: Vec<String>,
}

impl StagePolicy {
    pub fn new(tree: DoseTree, scaler: DoseScaler, feature_names: Vec<String>) -> Result<Self> {
        if let Some(f) = tree.max_feature() {
            if f >= feature_names.len() {
                return Err(Error::Shape {
                    expected: feature_names.len(),
                    got: f + 1,
                });
            }
        }
        Ok(Self {
            tree,
            scaler,
            feature_names,
        })
    }

    /// Dose in original units.
    pub fn dose(&self, history: &[f64]) -> Result<f64> {
        if history.len() != self.feature_names.len() {
            return Err(Error::Shape {
                expected: self.feature_names.len(),
                got: history.len(),
            });
        }
        Ok(self.scaler.unscale(self.tree.assigned_dose(history)))
    }
}

/// Fitted regime `g = (g_1, ..., g_T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    stages: Vec<StagePolicy>,
    /// Covariate names observed at each stage (before history expansion).
    stage_features: Vec<Vec<String>>,
    direction: Direction,
}

impl Policy {
    pub fn new(
        stages: Vec<StagePolicy>,
        stage_features: Vec<Vec<String>>,
        direction: Direction,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidData("policy needs at least one stage".into()));
        }
        if stage_features.len() != stages.len() {
            return Err(Error::Shape {
                expected: stages.len(),
                got: stage_features.len(),
            });
        }
        for (t, s) in stages.iter().enumerate() {
            let names = history_names(&stage_features, t + 1);
            if names != s.feature_names {
                return Err(Error::Schema(format!(
                    "stage {} history columns do not match the stage covariates",
                    t + 1
                )));
            }
        }
        Ok(Self {
            stages,
            stage_features,
            direction,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage `t`, 1-based.
    pub fn stage(&self, t: usize) -> &StagePolicy {
        &self.stages[t - 1]
    }

    pub fn stages(&self) -> &[StagePolicy] {
        &self.stages
    }

    pub fn stage_features(&self) -> &[Vec<String>] {
        &self.stage_features
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Dose at stage `t` for a full history row `H_t`.
    pub fn stage_dose(&self, t: usize, history: &[f64]) -> Result<f64> {
        if t == 0 || t > self.n_stages() {
            return Err(Error::Domain(format!(
                "stage index {t} outside 1..={}",
                self.n_stages()
            )));
        }
        self.stage(t).dose(history)
    }
}

/// Observations for one stage of one subject. `dose` and `reward` are only
/// needed when a later stage follows.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInput {
    pub covariates: Vec<f64>,
    pub dose: Option<f64>,
    pub reward: Option<f64>,
}

/// Recommended dose for every supplied stage. Later stages see the supplied
/// earlier doses, or the recommended ones when `use_recommended` is set.
pub fn recommend(
    policy: &Policy,
    inputs: &[StageInput],
    use_recommended: bool,
) -> Result<Vec<f64>> {
    if inputs.len() > policy.n_stages() {
        return Err(Error::Shape {
            expected: policy.n_stages(),
            got: inputs.len(),
        });
    }
    let mut out = Vec::with_capacity(inputs.len());
    let mut past: Vec<(usize, f64, f64)> = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let t = k + 1;
        let p = policy.stage_features[k].len();
        if input.covariates.len() != p {
            return Err(Error::Shape {
                expected: p,
                got: input.covariates.len(),
            });
        }
        let steps: Vec<HistoryStep<'_>> = past
            .iter()
            .map(|&(v, a, r)| HistoryStep {
                covariates: &inputs[v].covariates,
                dose: a,
                reward: r,
            })
            .collect();
        let h = history_row(&steps, &input.covariates);
        let dose = policy.stage_dose(t, &h)?;
        out.push(dose);
        if t < inputs.len() {
            let given = if use_recommended {
                Some(dose)
            } else {
                input.dose
            };
            let a = given.ok_or_else(|| {
                Error::InvalidData(format!("stage {t} dose is required for later stages"))
            })?;
            let r = input.reward.ok_or_else(|| {
                Error::InvalidData(format!("stage {t} reward is required for later stages"))
            })?;
            past.push((k, a, r));
        }
    }
    Ok(out)
}

/// Plug-in target `Y~_t`, length n.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcome(pub Vec<f64>);

/// `Y~_t,i = mu_{t+1}(H_{t+1,i}, rule(H_{t+1,i}))` for an arbitrary rule.
pub fn pseudo_outcome_with(
    om_next: &dyn OutcomeMean,
    rule: impl Fn(&[f64]) -> f64,
    h_next: &Array2<f64>,
) -> Result<PseudoOutcome> {
    let h = h_next.as_standard_layout();
    let p = h.ncols();
    let flat = h.as_slice().expect("standard layout");
    let values: Vec<f64> = flat
        .chunks(p)
        .map(|row| om_next.mean(row, rule(row)))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "pseudo-outcome for sample {i} is not finite"
        )));
    }
    Ok(PseudoOutcome(values))
}

/// `Y~_t` under the fitted stage-`t+1` tree. Both the tree and the outcome
/// model are on the same (standardized) dose scale.
pub fn pseudo_outcome(
    om_next: &dyn OutcomeMean,
    tree_next: &DoseTree,
    h_next: &Array2<f64>,
) -> Result<PseudoOutcome> {
    pseudo_outcome_with(om_next, |h| tree_next.assigned_dose(h), h_next)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub n_features: usize,
    pub target_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineDiagnostics>,
    /// Normalized per-leaf curves (internal maximize scale); empty for CART.
    #[serde(skip)]
    pub leaf_curves: Vec<LeafCurve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DtrDiagnostics {
    /// Stages in the order they were fit.
    pub fit_order: Vec<usize>,
    /// Reports in stage order 1..T.
    pub stages: Vec<StageReport>,
}

struct StageFit {
    tree: DoseTree,
    scaler: DoseScaler,
    outcome_model: OutcomeModel,
    diagnostics: Option<PipelineDiagnostics>,
    leaf_curves: Vec<LeafCurve>,
}

fn stage_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(t as u64 - 1))
}

fn fit_stage(ds: &Dataset, cfg: &DtrConfig, t: usize) -> Result<StageFit> {
    let pipeline = cfg
        .pipeline
        .clone()
        .with_seed(stage_seed(cfg.pipeline.tao.seed, t));
    match cfg.learner {
        StageLearner::GoDoTree => {
            let f = fit_single_stage(ds, &pipeline)?;
            let curves = leaf_curves(&f.tree, &f.curves, ds.covariates(), f.scaler);
            Ok(StageFit {
                tree: f.tree,
                scaler: f.scaler,
                outcome_model: f.outcome_model,
                diagnostics: Some(f.diagnostics),
                leaf_curves: curves,
            })
        }
        StageLearner::Cart => {
            pipeline.validate()?;
            let (sds, scaler) = standardize_doses(ds)?;
            let om = fit_outcome_model(&sds, &pipeline.outcome_model)?;
            let grid = DoseGrid::uniform(pipeline.grid_size)?;
            let cart = CartConfig {
                height: pipeline.tao.height,
                min_leaf: pipeline.tao.min_leaf,
            };
            let tree = baseline_cart(&sds, &om, &grid, &cart)?;
            Ok(StageFit {
                tree,
                scaler,
                outcome_model: om,
                diagnostics: None,
                leaf_curves: Vec::new(),
            })
        }
    }
}

/// Fits all stages from `T` down to 1.
pub fn fit_dtr(sd: &StageData, cfg: &DtrConfig) -> Result<(Policy, DtrDiagnostics)> {
    let n_stages = sd.n_stages();
    let direction = sd.stage(1).direction();
    let stage_features: Vec<Vec<String>> = sd
        .stages()
        .iter()
        .map(|s| s.feature_names().to_vec())
        .collect();
    let mut fitted: Vec<Option<(StagePolicy, StageReport)>> = vec![None; n_stages];
    let mut fit_order = Vec::with_capacity(n_stages);
    let mut next: Option<(StageFit, Array2<f64>)> = None;
    for t in (1..=n_stages).rev() {
        let wrap = |e: Error| Error::Stage {
            stage: t,
            source: Box::new(e),
        };
        let (h, names) = sd.build_history(t).map_err(wrap)?;
        let stage = sd.stage(t);
        let target: Vec<f64> = match &next {
            None => stage.outcomes().to_vec(),
            Some((f, h_next)) => {
                // The stage-(t+1) tree and outcome model share the standardized dose
                // scale, so the plug-in needs no unscaling.
                let y = pseudo_outcome(&f.outcome_model, &f.tree, h_next)
                    .map_err(wrap)?
                    .0;
                match cfg.psi {
                    PsiKind::Additive => {
                        y.iter().zip(stage.outcomes()).map(|(a, r)| a + r).collect()
                    }
                    PsiKind::LastValue => y,
                }
            }
        };
        let target_mean = target.iter().sum::<f64>() / target.len() as f64;
        let ds = Dataset::new(
            h.clone(),
            stage.doses().to_vec(),
            target,
            names.clone(),
            direction,
        )
        .map_err(wrap)?;
        let fit = fit_stage(&ds, cfg, t).map_err(wrap)?;
        fit_order.push(t);
        let policy = StagePolicy::new(fit.tree.clone(), fit.scaler, names).map_err(wrap)?;
        let report = StageReport {
            stage: t,
            n_features: h.ncols(),
            target_mean,
            pipeline: fit.diagnostics.clone(),
            leaf_curves: fit.leaf_curves.clone(),
        };
        fitted[t - 1] = Some((policy, report));
        next = Some((fit, h));
    }
    let (stages, reports): (Vec<_>, Vec<_>) = fitted
        .into_iter()
        .map(|s| s.expect("every stage fit"))
        .unzip();
    let policy = Policy::new(stages, stage_features, direction)?;
    Ok((
        policy,
        DtrDiagnostics {
            fit_order,
            stages: reports,
        },
    ))
}
