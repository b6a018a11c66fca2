//! Neighbourhood kernels built from effect-curve shape and covariate
//! similarity.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::effectcurve::{DoseGrid, EffectCurveGrid};
use crate::error::{Error, Result};
use crate::nuisance::{variable_importance, ImportanceWeights, OutcomeMean, RegressorSpec};

/// Initial curves `mu(x_i, .)` on the grid, direction-adjusted.
pub fn init_curves(mu: &dyn OutcomeMean, ds: &Dataset, grid: &DoseGrid) -> Result<EffectCurveGrid> {
    let sign = ds.direction().sign();
    let n = ds.n_samples();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = ds.row(i);
            grid.points()
                .iter()
                .map(|&a| sign * mu.mean(x, a))
                .collect()
        })
        .collect();
    let values = Array2::from_shape_fn((n, grid.len()), |(i, g)| rows[i][g]);
    EffectCurveGrid::new(values, grid.clone())
}

/// `D(i, j) = max θ_i + max θ_j - max (θ_i + θ_j)`, symmetric with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveDistanceMatrix(Array2<f64>);

impl CurveDistanceMatrix {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

pub fn curve_distance(curves: &EffectCurveGrid) -> CurveDistanceMatrix {
    let n = curves.n_samples();
    let maxima: Vec<f64> = (0..n).map(|i| curves.row_max(i)).collect();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = curves.row(i);
            (i + 1..n)
                .map(|j| {
                    let joint = ri
                        .iter()
                        .zip(curves.row(j))
                        .map(|(a, b)| a + b)
                        .fold(f64::NEG_INFINITY, f64::max);
                    (maxima[i] + maxima[j] - joint).max(0.0)
                })
                .collect()
        })
        .collect();
    let mut d = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    CurveDistanceMatrix(d)
}

/// Symmetric similarity in [-1, 1] with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

/// Pearson correlation between rows of a distance matrix. Rows with zero
/// variance are uncorrelated with every other row.
pub fn row_correlation_similarity(d: ArrayView2<'_, f64>) -> Result<SimilarityMatrix> {
    let (n, m) = d.dim();
    if n != m {
        return Err(Error::Shape {
            expected: n,
            got: m,
        });
    }
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    let mut z = d.to_owned();
    let mut constant = vec![false; n];
    for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.sum() / n as f64;
        row.mapv_inplace(|v| v - mean);
        let norm = row.dot(&row).sqrt();
        if norm <= 1e-300 || !norm.is_finite() {
            constant[i] = true;
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let n_const = constant.iter().filter(|&&c| c).count();
    if n_const > 0 {
        log::warn!("{n_const} distance rows have zero variance; their similarities are set to 0");
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            (i + 1..n)
                .map(|j| zi.dot(&z.row(j)).clamp(-1.0, 1.0))
                .collect()
        })
        .collect();
    let mut s = Array2::eye(n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix(s))
}

/// Weighted squared Euclidean distances `sum_k w_k (x_ik - x_jk)^2`.
pub fn weighted_distances(x: ArrayView2<'_, f64>, w: &ImportanceWeights) -> Result<Array2<f64>> {
    let (n, p) = x.dim();
    if w.len() != p {
        return Err(Error::Shape {
            expected: p,
            got: w.len(),
        });
    }
    let w = w.as_slice();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        (0..p).map(|k| w[k] * (x[[i, k]] - x[[j, k]]).powi(2)).sum()
    }))
}

pub fn weighted_euclidean_similarity(
    x: ArrayView2<'_, f64>,
    w: &ImportanceWeights,
) -> Result<SimilarityMatrix> {
    let d = weighted_distances(x, w)?;
    row_correlation_similarity(d.view())
}

/// How curve and covariate similarities combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    /// Neighbours must be similar in both curve shape and covariates.
    #[default]
    Min,
    /// Either kind of similarity suffices.
    Max,
}

/// Row `i` holds `K_i(x_j) = exp((s_ij - 1) / sigma_i^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    weights: Array2<f64>,
    sigma: Vec<f64>,
    n_leaf: f64,
}

pub const SIGMA2_BOUNDS: (f64, f64) = (1e-6, 1e6);
const ROW_SUM_TOLERANCE: f64 = 0.05;

impl KernelMatrix {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn n_leaf(&self) -> f64 {
        self.n_leaf
    }

    /// The same kernels without the unit shift in the exponent, i.e. row `i`
    /// multiplied by `exp(1 / sigma_i^2)`.
    pub fn unshifted(&self) -> Array2<f64> {
        let mut k = self.weights.clone();
        for (mut row, s) in k.axis_iter_mut(Axis(0)).zip(&self.sigma) {
            let c = (1.0 / (s * s)).exp();
            row.mapv_inplace(|v| v * c);
        }
        k
    }
}

fn row_sum(sims: &[f64], sigma2: f64) -> f64 {
    sims.iter().map(|&s| ((s - 1.0) / sigma2).exp()).sum()
}

/// Finds `sigma_i^2` with the row sum within 5% of `target` by bisection on
/// `log sigma^2`.
fn calibrate_row(row: usize, sims: &[f64], target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (SIGMA2_BOUNDS.0.ln(), SIGMA2_BOUNDS.1.ln());
    let f_lo = row_sum(sims, lo.exp());
    let f_hi = row_sum(sims, hi.exp());
    let ok = |f: f64| (f - target).abs() <= ROW_SUM_TOLERANCE * target;
    if f_hi - f_lo <= 1e-9 * f_hi {
        log::warn!("kernel row {row} is insensitive to its scale; using the upper bound");
        return Ok(SIGMA2_BOUNDS.1);
    }
    if f_lo > target * (1.0 + ROW_SUM_TOLERANCE) || f_hi < target * (1.0 - ROW_SUM_TOLERANCE) {
        return Err(Error::KernelCalibration { row, target });
    }
    let mut best = if (f_lo - target).abs() < (f_hi - target).abs() {
        lo
    } else {
        hi
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = row_sum(sims, mid.exp());
        best = mid;
        if (f - target).abs() <= 1e-4 * target {
            break;
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let f = row_sum(sims, best.exp());
    if !ok(f) {
        return Err(Error::KernelCalibration { row, target });
    }
    Ok(best.exp())
}

pub fn build_kernels(
    s: &SimilarityMatrix,
    s_tilde: &SimilarityMatrix,
    n_leaf: f64,
    combiner: Combiner,
) -> Result<KernelMatrix> {
    let n = s.n();
    if s_tilde.n() != n {
        return Err(Error::Shape {
            expected: n,
            got: s_tilde.n(),
        });
    }
    if !(n_leaf > 1.0 && n_leaf < n as f64) {
        return Err(Error::Config(format!(
            "n_leaf must lie strictly between 1 and n = {n}, got {n_leaf}"
        )));
    }
    let (a, b) = (s.as_array(), s_tilde.as_array());
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let combined: Vec<f64> = (0..n)
                .map(|j| match combiner {
                    Combiner::Min => a[[i, j]].min(b[[i, j]]),
                    Combiner::Max => a[[i, j]].max(b[[i, j]]),
                })
                .collect();
            let sigma2 = calibrate_row(i, &combined, n_leaf)?;
            let k = combined
                .iter()
                .map(|&m| ((m - 1.0) / sigma2).exp())
                .collect();
            Ok((k, sigma2.sqrt()))
        })
        .collect::<Result<_>>()?;
    let mut weights = Array2::zeros((n, n));
    let mut sigma = Vec::with_capacity(n);
    for (i, (k, sg)) in rows.into_iter().enumerate() {
        for (j, v) in k.into_iter().enumerate() {
            weights[[i, j]] = v;
        }
        sigma.push(sg);
    }
    Ok(KernelMatrix {
        weights,
        sigma,
        n_leaf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Target effective neighbourhood size; `None` means `n / 8`.
    pub n_leaf: Option<f64>,
    pub combiner: Combiner,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            n_leaf: None,
            combiner: Combiner::Min,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelDiagnostics {
    pub n_leaf: f64,
    pub importance: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Full kernel search: initial curves, curve distance, covariate distance
/// weighted by interaction importance, then calibrated kernels.
pub fn search_kernels(
    mu: &dyn OutcomeMean,
    ds: &Dataset,
    grid: &DoseGrid,
    importance_spec: &dyn RegressorSpec,
    cfg: &KernelConfig,
) -> Result<(KernelMatrix, KernelDiagnostics)> {
    let n = ds.n_samples();
    let n_leaf = cfg.n_leaf.unwrap_or(n as f64 / 8.0);
    let curves = init_curves(mu, ds, grid)?;
    let d = curve_distance(&curves);
    let s = row_correlation_similarity(d.as_array().view())?;
    let w = variable_importance(mu, ds, grid, importance_spec)?;
    let s_tilde = weighted_euclidean_similarity(ds.covariates().view(), &w)?;
    let k = build_kernels(&s, &s_tilde, n_leaf, cfg.combiner)?;
    let diag = KernelDiagnostics {
        n_leaf,
        importance: w.as_slice().to_vec(),
        sigma_min: k.sigma.iter().copied().fold(f64::INFINITY, f64::min),
        sigma_max: k.sigma.iter().copied().fold(0.0, f64::max),
    };
    Ok((k, diag))
}
