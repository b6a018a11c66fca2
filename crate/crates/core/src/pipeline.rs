//! Single-stage fit: working models, kernel search, effect curves, tree.

use serde::{Deserialize, Serialize};

use crate::data::{standardize_doses, Dataset, DoseScaler};
use crate::effectcurve::{
    estimate_effect_curves, CurveDiagnostics, DoseGrid, EffectCurveGrid, SmootherConfig,
    DEFAULT_GRID_SIZE,
};
use crate::error::{Error, Result};
use crate::kernelsearch::{search_kernels, KernelConfig, KernelDiagnostics};
use crate::nuisance::{
    fit_outcome_model, fit_propensity_model, GbtConfig, OutcomeModel, RegressorConfig,
    DEFAULT_DENSITY_FLOOR,
};
use crate::tao::{tao_fit, AnnealSchedule, DoseTree, TaoConfig, TaoDiagnostics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid_size: usize,
    pub outcome_model: RegressorConfig,
    pub propensity_model: RegressorConfig,
    /// Auxiliary model regressing greedy doses on covariates.
    pub importance_model: RegressorConfig,
    pub density_floor: f64,
    pub kernel: KernelConfig,
    pub smoother: SmootherConfig,
    pub tao: TaoConfig,
    pub anneal: AnnealSchedule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            outcome_model: RegressorConfig::default(),
            propensity_model: RegressorConfig::Gbt(GbtConfig {
                n_rounds: 100,
                max_depth: 3,
                ..GbtConfig::default()
            }),
            importance_model: RegressorConfig::Gbt(GbtConfig {
                n_rounds: 100,
                max_depth: 3,
                ..GbtConfig::default()
            }),
            density_floor: DEFAULT_DENSITY_FLOOR,
            kernel: KernelConfig::default(),
            smoother: SmootherConfig::default(),
            tao: TaoConfig::default(),
            anneal: AnnealSchedule::default(),
        }
    }
}

impl PipelineConfig {
    /// Sets every seed-bearing component from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.tao.seed = seed;
        self.outcome_model.set_seed(seed);
        self.propensity_model.set_seed(seed.wrapping_add(1));
        self.importance_model.set_seed(seed.wrapping_add(2));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if !(self.density_floor > 0.0 && self.density_floor.is_finite()) {
            return Err(Error::Config("density_floor must be positive".into()));
        }
        for (name, g) in [
            ("outcome_model", &self.outcome_model),
            ("propensity_model", &self.propensity_model),
            ("importance_model", &self.importance_model),
        ] {
            g.validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if let Some(a) = self.anneal.alpha0 {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config("alpha0 must be positive".into()));
            }
        }
        self.smoother.validate()?;
        self.tao.validate()
    }
}

/// Summed effect curve of one leaf's training samples, shifted so its
/// maximum is zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafCurve {
    /// Arena id of the leaf.
    pub leaf: usize,
    pub n_samples: usize,
    /// Grid doses in original units.
    pub doses: Vec<f64>,
    pub values: Vec<f64>,
}

/// Per-leaf curves for `tree` over the samples in `x`; empty leaves are skipped.
pub fn leaf_curves(
    tree: &DoseTree,
    curves: &EffectCurveGrid,
    x: &ndarray::Array2<f64>,
    scaler: DoseScaler,
) -> Vec<LeafCurve> {
    let members = tree.node_members(x);
    let doses: Vec<f64> = curves
        .grid()
        .points()
        .iter()
        .map(|&u| scaler.unscale(u))
        .collect();
    tree.leaf_ids()
        .into_iter()
        .filter(|&id| !members[id].is_empty())
        .map(|id| {
            let mut values = vec![0.0; doses.len()];
            for &i in &members[id] {
                for (v, c) in values.iter_mut().zip(curves.row(i)) {
                    *v += c;
                }
            }
            let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            values.iter_mut().for_each(|v| *v -= top);
            LeafCurve {
                leaf: id,
                n_samples: members[id].len(),
                doses: doses.clone(),
                values,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineDiagnostics {
    pub n_samples: usize,
    pub dose_scaler: DoseScaler,
    pub outcome_train_rmse: f64,
    pub propensity_scale: f64,
    pub kernel: KernelDiagnostics,
    pub curves: CurveDiagnostics,
    pub tao: TaoDiagnostics,
}

/// Result of a single-stage fit. The tree and the outcome model work on the
/// standardized dose scale; `scaler` maps back to original units.
#[derive(Debug, Clone)]
pub struct FittedStage {
    pub tree: DoseTree,
    pub scaler: DoseScaler,
    pub outcome_model: OutcomeModel,
    pub curves: EffectCurveGrid,
    pub diagnostics: PipelineDiagnostics,
}

impl FittedStage {
    /// Tree with leaf doses in original units.
    pub fn tree_unscaled(&self) -> DoseTree {
        let s = self.scaler;
        self.tree.map_doses(|d| s.unscale(d))
    }

    pub fn recommend(&self, x: &[f64]) -> f64 {
        self.scaler.unscale(self.tree.assigned_dose(x))
    }
}

pub fn fit_single_stage(ds: &Dataset, cfg: &PipelineConfig) -> Result<FittedStage> {
    cfg.validate()?;
    let (sds, scaler) = standardize_doses(ds)?;
    let om = fit_outcome_model(&sds, &cfg.outcome_model)?;
    let pi = fit_propensity_model(&sds, &cfg.propensity_model, cfg.density_floor)?;
    let grid = DoseGrid::uniform(cfg.grid_size)?;
    let (kernel, kdiag) = search_kernels(&om, &sds, &grid, &cfg.importance_model, &cfg.kernel)?;
    let (curves, cdiag) = estimate_effect_curves(
        &sds,
        &om,
        &pi,
        kernel.weights().view(),
        &grid,
        &cfg.smoother,
    )?;
    let (tree, tdiag) = tao_fit(&curves, sds.covariates(), &cfg.tao, &cfg.anneal)?;
    log::debug!(
        "stage fit: bandwidth {:.4}, {} leaves, objective {:.4}",
        cdiag.bandwidth,
        tree.n_leaves(),
        tdiag.objective_after_prune
    );
    let diagnostics = PipelineDiagnostics {
        n_samples: ds.n_samples(),
        dose_scaler: scaler,
        outcome_train_rmse: om.train_rmse(),
        propensity_scale: pi.scale(),
        kernel: kdiag,
        curves: cdiag,
        tao: tdiag,
    };
    Ok(FittedStage {
        tree,
        scaler,
        outcome_model: om,
        curves,
        diagnostics,
    })
}
