//! Working models: the conditional outcome mean, the continuous-dose
//! propensity density, and treatment-interaction variable importance.

mod bart;
mod tree;

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::Dataset;
use crate::effectcurve::DoseGrid;
use crate::error::{Error, Result};

pub use bart::{Bart, BartConfig};
pub use tree::{Gbt, GbtConfig, RegressionTree, TreeNode, TreeParams};

/// Minimum sample count for fitting a working model.
pub const MIN_FIT_SAMPLES: usize = 20;

/// A fitted regressor over a feature row.
pub trait Regressor: Send + Sync + Debug {
    fn predict(&self, row: &[f64]) -> f64;

    /// Nonnegative per-feature importance (unnormalized).
    fn feature_importance(&self) -> Vec<f64>;
}

/// Produces fitted regressors; the seam for swapping the working model.
pub trait RegressorSpec: Send + Sync {
    fn fit(&self, x: &Array2<f64>, y: &[f64]) -> Result<Arc<dyn Regressor>>;
}

impl RegressorSpec for GbtConfig {
    fn fit(&self, x: &Array2<f64>, y: &[f64]) -> Result<Arc<dyn Regressor>> {
        Ok(Arc::new(Gbt::fit(x, y, self)))
    }
}

impl RegressorSpec for BartConfig {
    fn fit(&self, x: &Array2<f64>, y: &[f64]) -> Result<Arc<dyn Regressor>> {
        Ok(Arc::new(Bart::fit(x, y, self)))
    }
}

/// Choice of working regressor, tagged by `kind` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegressorConfig {
    Gbt(GbtConfig),
    Bart(BartConfig),
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self::Bart(BartConfig::default())
    }
}

impl RegressorConfig {
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Self::Gbt(g) => g.seed = seed,
            Self::Bart(b) => b.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gbt(g) => {
                if g.n_rounds == 0 || g.max_depth == 0 || g.min_samples_leaf == 0 {
                    return Err(Error::Config(
                        "n_rounds, max_depth and min_samples_leaf must be positive".into(),
                    ));
                }
                if !(g.learning_rate > 0.0 && g.subsample > 0.0 && g.subsample <= 1.0) {
                    return Err(Error::Config(
                        "learning_rate must be positive and subsample in (0, 1]".into(),
                    ));
                }
            }
            Self::Bart(b) => {
                if b.n_trees == 0 || b.n_draws == 0 || b.n_cuts == 0 {
                    return Err(Error::Config(
                        "n_trees, n_draws and n_cuts must be positive".into(),
                    ));
                }
                if !(b.alpha > 0.0 && b.alpha < 1.0 && b.beta >= 0.0 && b.k > 0.0) {
                    return Err(Error::Config("alpha in (0, 1), beta >= 0, k > 0".into()));
                }
                if !(b.nu > 0.0 && b.q > 0.0 && b.q < 1.0) {
                    return Err(Error::Config("nu > 0 and q in (0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

impl RegressorSpec for RegressorConfig {
    fn fit(&self, x: &Array2<f64>, y: &[f64]) -> Result<Arc<dyn Regressor>> {
        match self {
            Self::Gbt(g) => g.fit(x, y),
            Self::Bart(b) => b.fit(x, y),
        }
    }
}

/// Regressor predicting a fixed value.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRegressor(pub f64);

impl Regressor for ConstantRegressor {
    fn predict(&self, _row: &[f64]) -> f64 {
        self.0
    }

    fn feature_importance(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Conditional outcome mean `mu(x, a)` on the raw outcome scale.
pub trait OutcomeMean: Send + Sync {
    fn mean(&self, x: &[f64], a: f64) -> f64;
}

/// Conditional dose density `pi(a | x)`.
pub trait DoseDensity: Send + Sync {
    fn density(&self, a: f64, x: &[f64]) -> f64;
}

impl<F> OutcomeMean for F
where
    F: Fn(&[f64], f64) -> f64 + Send + Sync,
{
    fn mean(&self, x: &[f64], a: f64) -> f64 {
        self(x, a)
    }
}

/// Fitted regressor of `Y` on `(X, A)`; the dose is the last feature.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    regressor: Arc<dyn Regressor>,
    n_train: usize,
    n_features: usize,
    train_rmse: f64,
}

impl OutcomeModel {
    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn train_rmse(&self) -> f64 {
        self.train_rmse
    }

    pub fn regressor(&self) -> &Arc<dyn Regressor> {
        &self.regressor
    }

    pub fn predict(&self, x: &[f64], a: f64) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Shape {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.mean(x, a))
    }
}

impl OutcomeMean for OutcomeModel {
    fn mean(&self, x: &[f64], a: f64) -> f64 {
        let mut row = Vec::with_capacity(x.len() + 1);
        row.extend_from_slice(x);
        row.push(a);
        self.regressor.predict(&row)
    }
}

fn check_size(n: usize) -> Result<()> {
    if n < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_SAMPLES,
            got: n,
        });
    }
    Ok(())
}

fn with_dose_column(ds: &Dataset) -> Array2<f64> {
    let (n, p) = ds.covariates().dim();
    let mut xa = Array2::zeros((n, p + 1));
    xa.slice_mut(ndarray::s![.., ..p]).assign(ds.covariates());
    for (i, &a) in ds.doses().iter().enumerate() {
        xa[[i, p]] = a;
    }
    xa
}

/// Fits `mu(x, a)` to the raw outcomes.
pub fn fit_outcome_model(ds: &Dataset, spec: &dyn RegressorSpec) -> Result<OutcomeModel> {
    check_size(ds.n_samples())?;
    let xa = with_dose_column(ds);
    let regressor = spec.fit(&xa, ds.outcomes())?;
    let sse: f64 = (0..ds.n_samples())
        .map(|i| {
            let r = ds.outcomes()[i] - regressor.predict(xa.row(i).as_slice().unwrap());
            r * r
        })
        .sum();
    Ok(OutcomeModel {
        regressor,
        n_train: ds.n_samples(),
        n_features: ds.n_features(),
        train_rmse: (sse / ds.n_samples() as f64).sqrt(),
    })
}

pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-3;
const MIN_RESIDUAL_SCALE: f64 = 0.01;

/// Gaussian residual model for the dose, truncated to [0, 1] and floored.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    mean_model: Arc<dyn Regressor>,
    scale: f64,
    floor: f64,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl PropensityModel {
    pub fn from_parts(mean_model: Arc<dyn Regressor>, scale: f64, floor: f64) -> Result<Self> {
        if !(scale > 0.0 && floor > 0.0) {
            return Err(Error::Domain(
                "propensity scale and floor must be positive".into(),
            ));
        }
        Ok(Self {
            mean_model,
            scale,
            floor,
        })
    }

    pub fn conditional_mean(&self, x: &[f64]) -> f64 {
        self.mean_model.predict(x)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

impl DoseDensity for PropensityModel {
    fn density(&self, a: f64, x: &[f64]) -> f64 {
        if !(0.0..=1.0).contains(&a) {
            return self.floor;
        }
        let m = self.mean_model.predict(x);
        let s = self.scale;
        let mass = std_normal_cdf((1.0 - m) / s) - std_normal_cdf(-m / s);
        if mass.is_nan() || mass < 1e-300 {
            return self.floor;
        }
        let d = std_normal_pdf((a - m) / s) / (s * mass);
        if d.is_finite() {
            d.max(self.floor)
        } else {
            self.floor
        }
    }
}

/// Fits the dose mean `m_A(x)` and sets the scale to the residual SD.
pub fn fit_propensity_model(
    ds: &Dataset,
    spec: &dyn RegressorSpec,
    floor: f64,
) -> Result<PropensityModel> {
    check_size(ds.n_samples())?;
    let a = ds.doses();
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    if a.iter().all(|&v| v == mean_a) {
        return Err(Error::DegeneratePropensity);
    }
    let mean_model = spec.fit(ds.covariates(), a)?;
    let resid: Vec<f64> = (0..ds.n_samples())
        .map(|i| a[i] - mean_model.predict(ds.row(i)))
        .collect();
    let rm = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|r| (r - rm) * (r - rm)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::DegeneratePropensity);
    }
    PropensityModel::from_parts(mean_model, var.sqrt().max(MIN_RESIDUAL_SCALE), floor)
}

/// Per-feature weights, nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights(Vec<f64>);

impl ImportanceWeights {
    pub fn uniform(p: usize) -> Self {
        Self(vec![1.0 / p as f64; p])
    }

    /// Normalizes nonnegative raw scores; all-zero scores become uniform.
    pub fn from_raw(raw: &[f64]) -> Self {
        let clean: Vec<f64> = raw
            .iter()
            .map(|&v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        let total: f64 = clean.iter().sum();
        if total <= 0.0 {
            return Self::uniform(raw.len());
        }
        Self(clean.iter().map(|v| v / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Per-sample dose maximizing the direction-adjusted outcome mean on the grid.
pub fn greedy_doses(mu: &dyn OutcomeMean, ds: &Dataset, grid: &DoseGrid) -> Vec<f64> {
    let sign = ds.direction().sign();
    (0..ds.n_samples())
        .map(|i| {
            let x = ds.row(i);
            let k = argmax(grid.points().iter().map(|&a| sign * mu.mean(x, a)));
            grid.points()[k]
        })
        .collect()
}

/// Importance of each covariate for the optimal dose (not the outcome level):
/// greedy per-sample doses are regressed on `X` and the auxiliary model's
/// impurity-decrease importances are normalized.
pub fn variable_importance(
    mu: &dyn OutcomeMean,
    ds: &Dataset,
    grid: &DoseGrid,
    spec: &dyn RegressorSpec,
) -> Result<ImportanceWeights> {
    let p = ds.n_features();
    if p == 1 {
        return Ok(ImportanceWeights(vec![1.0]));
    }
    let doses = greedy_doses(mu, ds, grid);
    if doses.iter().all(|&d| d == doses[0]) {
        log::warn!("greedy optimal dose is constant across samples; using uniform weights");
        return Ok(ImportanceWeights::uniform(p));
    }
    let aux = spec.fit(ds.covariates(), &doses)?;
    let raw = aux.feature_importance();
    if raw.len() != p {
        return Err(Error::Shape {
            expected: p,
            got: raw.len(),
        });
    }
    Ok(ImportanceWeights::from_raw(&raw))
}
