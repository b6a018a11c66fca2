//! Individual-level effect curves.
//!
//! For a kernel row `K_i`, every sample `j` gets a doubly robust
//! pseudo-outcome
//!
//! ```text
//! xi_j = ( (Y_j - mu(X_j, A_j)) / pi(A_j | X_j) * w(A_j) * K_i(X_j) + m(A_j) ) / kappa
//! ```
//!
//! with `w(a) = mean_l pi(a | x_l)`, `m(a) = mean_l K_i(x_l) mu(x_l, a)` and
//! `kappa = mean_l K_i(x_l)`. The curve `theta_i` is the local-linear
//! regression of `xi` on the dose, evaluated on a shared [`DoseGrid`].

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{DoseDensity, OutcomeMean, DEFAULT_DENSITY_FLOOR};

/// Strictly increasing dose points covering [0, 1], endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    points: Vec<f64>,
}

pub const DEFAULT_GRID_SIZE: usize = 100;

impl DoseGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Domain("dose grid needs at least 2 points".into()));
        }
        if points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(Error::Domain(
                "dose grid must start at 0 and end at 1".into(),
            ));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain(
                "dose grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// `g` evenly spaced points on [0, 1].
    pub fn uniform(g: usize) -> Result<Self> {
        if g < 2 {
            return Err(Error::Domain("dose grid needs at least 2 points".into()));
        }
        let last = (g - 1) as f64;
        Self::new((0..g).map(|k| k as f64 / last).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the grid point nearest to `a`; ties go to the lower point.
    pub fn nearest_index(&self, a: f64) -> usize {
        let pos = self.points.partition_point(|&p| p < a);
        if pos == 0 {
            return 0;
        }
        if pos == self.points.len() {
            return pos - 1;
        }
        if a - self.points[pos - 1] <= self.points[pos] - a {
            pos - 1
        } else {
            pos
        }
    }

    /// Largest spacing between neighbouring points.
    pub fn resolution(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingKernel {
    #[default]
    Epanechnikov,
    Gaussian,
}

impl SmoothingKernel {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            SmoothingKernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            SmoothingKernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmootherConfig {
    pub bandwidth: Bandwidth,
    pub kernel: SmoothingKernel,
    /// Candidates searched by leave-one-out when `bandwidth` is `Auto`.
    pub candidates: Vec<f64>,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Auto,
            kernel: SmoothingKernel::Epanechnikov,
            candidates: default_bandwidths(),
        }
    }
}

/// Twelve geometrically spaced bandwidths from 0.03 to 0.5.
pub fn default_bandwidths() -> Vec<f64> {
    let (lo, hi, k) = (0.03f64, 0.5f64, 12);
    (0..k)
        .map(|i| lo * (hi / lo).powf(i as f64 / (k - 1) as f64))
        .collect()
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(b) if !(b > 0.0 && b.is_finite()) => Err(Error::Config(format!(
                "bandwidth must be positive, got {b}"
            ))),
            Bandwidth::Auto if self.candidates.is_empty() => {
                Err(Error::Config("empty bandwidth candidate list".into()))
            }
            Bandwidth::Auto if self.candidates.iter().any(|&b| !(b > 0.0 && b.is_finite())) => Err(
                Error::Config("bandwidth candidates must be positive".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Linear smoother: row `g` holds the weights that map pseudo-outcomes to the
/// local-linear estimate at grid point `g`.
#[derive(Debug, Clone)]
pub struct SmootherMatrix {
    weights: Array2<f64>,
    fallback_points: Vec<usize>,
}

struct LocalMoments {
    s0: f64,
    s1: f64,
    s2: f64,
}

fn moments(doses: &[f64], a: f64, b: f64, kernel: SmoothingKernel) -> LocalMoments {
    let mut m = LocalMoments {
        s0: 0.0,
        s1: 0.0,
        s2: 0.0,
    };
    for &d in doses {
        let u = (d - a) / b;
        let w = kernel.eval(u) / b;
        m.s0 += w;
        m.s1 += w * u;
        m.s2 += w * u * u;
    }
    m
}

/// Relative determinant below which the 2x2 local system is treated as singular.
const SINGULAR_TOL: f64 = 1e-10;

impl SmootherMatrix {
    pub fn new(doses: &[f64], grid: &DoseGrid, b: f64, kernel: SmoothingKernel) -> Self {
        let n = doses.len();
        let g = grid.len();
        let mut weights = Array2::zeros((g, n));
        let mut fallback_points = Vec::new();
        for (gi, &a) in grid.points().iter().enumerate() {
            let m = moments(doses, a, b, kernel);
            let det = m.s0 * m.s2 - m.s1 * m.s1;
            let mut row = weights.row_mut(gi);
            if m.s0 > 0.0 && det > SINGULAR_TOL * m.s0 * m.s2 {
                for (j, &d) in doses.iter().enumerate() {
                    let u = (d - a) / b;
                    let w = kernel.eval(u) / b;
                    row[j] = w * (m.s2 - m.s1 * u) / det;
                }
            } else {
                fallback_points.push(gi);
                // Locally constant fit; with no data in the kernel support the
                // Gaussian kernel supplies positive weights everywhere.
                let k = if m.s0 > 0.0 {
                    kernel
                } else {
                    SmoothingKernel::Gaussian
                };
                let w: Vec<f64> = doses.iter().map(|&d| k.eval((d - a) / b)).collect();
                let total: f64 = w.iter().sum();
                if total > 0.0 {
                    for j in 0..n {
                        row[j] = w[j] / total;
                    }
                } else {
                    row.fill(1.0 / n as f64);
                }
            }
        }
        Self {
            weights,
            fallback_points,
        }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Grid indices where the local-linear system was singular.
    pub fn fallback_points(&self) -> &[usize] {
        &self.fallback_points
    }

    pub fn apply(&self, xi: ArrayView1<'_, f64>) -> Vec<f64> {
        self.weights.dot(&xi).to_vec()
    }
}

/// Local-linear estimates of `E[xi | A = a]` at every grid point.
pub fn local_linear_smooth(
    xi: &[f64],
    doses: &[f64],
    grid: &DoseGrid,
    b: f64,
    kernel: SmoothingKernel,
) -> Result<Vec<f64>> {
    if xi.len() != doses.len() {
        return Err(Error::Shape {
            expected: doses.len(),
            got: xi.len(),
        });
    }
    if !(b > 0.0) {
        return Err(Error::Domain(format!(
            "bandwidth must be positive, got {b}"
        )));
    }
    let sm = SmootherMatrix::new(doses, grid, b, kernel);
    Ok(sm.apply(ArrayView1::from(xi)))
}

/// Leave-one-out criterion for bandwidth `b`, via the hat-matrix shortcut.
/// `None` when some observation has leverage of one or more.
pub fn loo_criterion(xi: &[f64], doses: &[f64], b: f64, kernel: SmoothingKernel) -> Option<f64> {
    let mut total = 0.0;
    for (i, &ai) in doses.iter().enumerate() {
        let m = moments(doses, ai, b, kernel);
        let det = m.s0 * m.s2 - m.s1 * m.s1;
        if !(m.s0 > 0.0 && det > SINGULAR_TOL * m.s0 * m.s2) {
            return None;
        }
        let mut fit = 0.0;
        for (j, &d) in doses.iter().enumerate() {
            let u = (d - ai) / b;
            fit += kernel.eval(u) / b * (m.s2 - m.s1 * u) / det * xi[j];
        }
        let leverage = kernel.eval(0.0) / b * m.s2 / det;
        if leverage >= 1.0 {
            return None;
        }
        let r = (xi[i] - fit) / (1.0 - leverage);
        total += r * r;
    }
    Some(total)
}

/// Bandwidth minimizing the leave-one-out squared error. Near-ties resolve
/// to the smallest bandwidth.
pub fn loo_bandwidth(
    xi: &[f64],
    doses: &[f64],
    candidates: &[f64],
    kernel: SmoothingKernel,
) -> Result<f64> {
    if candidates.is_empty() || candidates.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::Config(
            "bandwidth candidates must be nonempty and positive".into(),
        ));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let scores: Vec<(f64, f64)> = sorted
        .par_iter()
        .filter_map(|&b| loo_criterion(xi, doses, b, kernel).map(|c| (b, c)))
        .collect();
    if scores.is_empty() {
        return Err(Error::BandwidthSelection);
    }
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let mean = xi.iter().sum::<f64>() / xi.len() as f64;
    let spread: f64 = xi.iter().map(|v| (v - mean) * (v - mean)).sum();
    let tol = 1e-9 * (best + spread + 1e-300);
    Ok(scores
        .iter()
        .find(|s| s.1 <= best + tol)
        .map(|s| s.0)
        .expect("best is attained"))
}

/// Quantities shared by the pseudo-outcomes of every kernel row.
#[derive(Debug, Clone)]
pub struct DrPrecompute {
    /// `(Y_j - mu(X_j, A_j)) / pi(A_j | X_j) * w(A_j)`.
    residual_term: Vec<f64>,
    /// `mu(x_l, A_j)` at row `l`, column `j`.
    cross_mean: Array2<f64>,
    marginal_density: Vec<f64>,
}

impl DrPrecompute {
    pub fn new(ds: &Dataset, mu: &dyn OutcomeMean, pi: &dyn DoseDensity) -> Self {
        let n = ds.n_samples();
        let a = ds.doses();
        let y = ds.outcomes();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|l| {
                let x = ds.row(l);
                let m: Vec<f64> = a.iter().map(|&aj| mu.mean(x, aj)).collect();
                let p: Vec<f64> = a.iter().map(|&aj| pi.density(aj, x)).collect();
                (m, p)
            })
            .collect();
        let mut cross_mean = Array2::zeros((n, n));
        let mut marginal_density = vec![0.0; n];
        for (l, (m, p)) in rows.iter().enumerate() {
            cross_mean
                .row_mut(l)
                .assign(&ArrayView1::from(m.as_slice()));
            for j in 0..n {
                marginal_density[j] += p[j];
            }
        }
        for w in &mut marginal_density {
            *w /= n as f64;
        }
        let residual_term = (0..n)
            .map(|j| {
                let pi_obs = rows[j].1[j].max(DEFAULT_DENSITY_FLOOR);
                (y[j] - cross_mean[[j, j]]) / pi_obs * marginal_density[j]
            })
            .collect();
        Self {
            residual_term,
            cross_mean,
            marginal_density,
        }
    }

    /// `w(A_j)` for each sample.
    pub fn marginal_density(&self) -> &[f64] {
        &self.marginal_density
    }

    pub fn components(&self, kernel_row: &[f64]) -> Result<DrComponents> {
        check_kernel_row(kernel_row, self.residual_term.len())?;
        let n = kernel_row.len() as f64;
        let kappa = kernel_row.iter().sum::<f64>() / n;
        let m_hat = self
            .cross_mean
            .t()
            .dot(&ArrayView1::from(kernel_row))
            .mapv(|v| v / n)
            .to_vec();
        Ok(DrComponents {
            kappa,
            w_hat: self.marginal_density.clone(),
            m_hat,
        })
    }

    pub fn pseudo_outcomes(&self, kernel_row: &[f64]) -> Result<Vec<f64>> {
        let c = self.components(kernel_row)?;
        Ok(self
            .residual_term
            .iter()
            .zip(kernel_row)
            .zip(&c.m_hat)
            .map(|((r, k), m)| (r * k + m) / c.kappa)
            .collect())
    }

    /// Pseudo-outcomes for every kernel row at once; row `i` of the result
    /// corresponds to row `i` of `kernel`.
    pub fn pseudo_outcome_matrix(&self, kernel: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.residual_term.len();
        if kernel.dim() != (n, n) {
            return Err(Error::Shape {
                expected: n,
                got: kernel.nrows(),
            });
        }
        for row in kernel.axis_iter(Axis(0)) {
            check_kernel_row(row.as_slice().unwrap_or(&row.to_vec()), n)?;
        }
        let nf = n as f64;
        let mut xi = kernel.dot(&self.cross_mean);
        xi.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(kernel.axis_iter(Axis(0)))
            .for_each(|(mut out, k)| {
                let kappa = k.sum() / nf;
                for j in 0..n {
                    out[j] = (self.residual_term[j] * k[j] + out[j] / nf) / kappa;
                }
            });
        Ok(xi)
    }
}

fn check_kernel_row(kernel_row: &[f64], n: usize) -> Result<()> {
    if kernel_row.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: kernel_row.len(),
        });
    }
    if kernel_row.iter().any(|&k| !(k >= 0.0) || !k.is_finite()) {
        return Err(Error::DegenerateKernel);
    }
    if !(kernel_row.iter().sum::<f64>() > 0.0) {
        return Err(Error::DegenerateKernel);
    }
    Ok(())
}

/// `w`, `m` and `kappa` for one kernel row; `w_hat` and `m_hat` are evaluated
/// at the observed doses.
#[derive(Debug, Clone, PartialEq)]
pub struct DrComponents {
    pub kappa: f64,
    pub w_hat: Vec<f64>,
    pub m_hat: Vec<f64>,
}

/// Doubly robust pseudo-outcomes for a single kernel row.
pub fn dr_pseudo_outcomes(
    ds: &Dataset,
    mu: &dyn OutcomeMean,
    pi: &dyn DoseDensity,
    kernel_row: &[f64],
) -> Result<Vec<f64>> {
    check_kernel_row(kernel_row, ds.n_samples())?;
    DrPrecompute::new(ds, mu, pi).pseudo_outcomes(kernel_row)
}

/// Estimated curves on the internal "larger is better" scale, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectCurveGrid {
    values: Array2<f64>,
    grid: DoseGrid,
}

impl EffectCurveGrid {
    pub fn new(values: Array2<f64>, grid: DoseGrid) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                got: values.ncols(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite effect curve value".into()));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
            grid,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn grid(&self) -> &DoseGrid {
        &self.grid
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let g = self.grid.len();
        &self.values.as_slice().expect("standard layout")[i * g..(i + 1) * g]
    }

    #[inline]
    pub fn value(&self, i: usize, g: usize) -> f64 {
        self.values[[i, g]]
    }

    pub fn row_max(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Grid index of the first maximum of row `i`.
    pub fn row_argmax(&self, i: usize) -> usize {
        crate::nuisance::argmax(self.row(i).iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveDiagnostics {
    pub bandwidth: f64,
    pub bandwidth_selected: bool,
    pub fallback_grid_points: Vec<usize>,
}

/// Runs the doubly robust smoother for every kernel row.
pub fn estimate_effect_curves(
    ds: &Dataset,
    mu: &dyn OutcomeMean,
    pi: &dyn DoseDensity,
    kernel: ArrayView2<'_, f64>,
    grid: &DoseGrid,
    cfg: &SmootherConfig,
) -> Result<(EffectCurveGrid, CurveDiagnostics)> {
    cfg.validate()?;
    let pre = DrPrecompute::new(ds, mu, pi);
    let (bandwidth, selected) = match cfg.bandwidth {
        Bandwidth::Fixed(b) => (b, false),
        Bandwidth::Auto => {
            let ones = vec![1.0; ds.n_samples()];
            let xi = pre.pseudo_outcomes(&ones)?;
            (
                loo_bandwidth(&xi, ds.doses(), &cfg.candidates, cfg.kernel)?,
                true,
            )
        }
    };
    let smoother = SmootherMatrix::new(ds.doses(), grid, bandwidth, cfg.kernel);
    if !smoother.fallback_points().is_empty() {
        log::warn!(
            "local-linear system singular at {} grid points; used locally constant fit",
            smoother.fallback_points().len()
        );
    }
    let xi = pre.pseudo_outcome_matrix(kernel)?;
    let mut values = xi.dot(&smoother.weights().t());
    let sign = ds.direction().sign();
    if sign != 1.0 {
        values.mapv_inplace(|v| sign * v);
    }
    Ok((
        EffectCurveGrid::new(values, grid.clone())?,
        CurveDiagnostics {
            bandwidth,
            bandwidth_selected: selected,
            fallback_grid_points: smoother.fallback_points().to_vec(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Direction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn uniform_doses(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn grid_basics() {
        let g = DoseGrid::uniform(5).unwrap();
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.nearest_index(0.1), 0);
        assert_eq!(g.nearest_index(0.125), 0);
        assert_eq!(g.nearest_index(0.13), 1);
        assert_eq!(g.nearest_index(2.0), 4);
        assert!(DoseGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(DoseGrid::new(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn reproduces_lines() {
        let doses = uniform_doses(300, 1);
        let xi: Vec<f64> = doses.iter().map(|a| 2.0 + 3.0 * a).collect();
        let grid = DoseGrid::uniform(100).unwrap();
        for kernel in [SmoothingKernel::Epanechnikov, SmoothingKernel::Gaussian] {
            let fit = local_linear_smooth(&xi, &doses, &grid, 0.08, kernel).unwrap();
            for (g, &a) in grid.points().iter().enumerate() {
                assert!((fit[g] - (2.0 + 3.0 * a)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_stays_constant() {
        let doses = uniform_doses(100, 2);
        let grid = DoseGrid::uniform(50).unwrap();
        let fit = local_linear_smooth(&[4.5; 100], &doses, &grid, 0.1, SmoothingKernel::default())
            .unwrap();
        assert!(fit.iter().all(|v| (v - 4.5).abs() < 1e-10));
    }

    #[test]
    fn recovers_sine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let doses = uniform_doses(2000, 4);
        let tau = std::f64::consts::TAU;
        let xi: Vec<f64> = doses
            .iter()
            .map(|a| (tau * a).sin() + noise.sample(&mut rng))
            .collect();
        let grid = DoseGrid::uniform(101).unwrap();
        let fit =
            local_linear_smooth(&xi, &doses, &grid, 0.05, SmoothingKernel::default()).unwrap();
        for (g, &a) in grid.points().iter().enumerate() {
            if (0.1..=0.9).contains(&a) {
                assert!((fit[g] - (tau * a).sin()).abs() <= 0.15);
            }
        }
    }

    #[test]
    fn empty_window_falls_back() {
        let doses = vec![0.0, 0.01, 0.02, 0.98, 0.99, 1.0];
        let xi = vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0];
        let grid = DoseGrid::uniform(11).unwrap();
        let sm = SmootherMatrix::new(&doses, &grid, 0.05, SmoothingKernel::Epanechnikov);
        assert!(sm.fallback_points().contains(&5));
        let fit = sm.apply(ArrayView1::from(&xi));
        assert!(fit.iter().all(|v| v.is_finite()));
        assert!((fit[0] - 1.0).abs() < 1e-12);
    }

    /// Direct leave-one-out: refit without observation `i` and predict at `A_i`.
    fn explicit_loo(xi: &[f64], doses: &[f64], b: f64, kernel: SmoothingKernel) -> f64 {
        let n = xi.len();
        let mut total = 0.0;
        for i in 0..n {
            let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let u = (doses[j] - doses[i]) / b;
                let w = kernel.eval(u) / b;
                s0 += w;
                s1 += w * u;
                s2 += w * u * u;
                t0 += w * xi[j];
                t1 += w * u * xi[j];
            }
            let fit = (s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1);
            total += (xi[i] - fit).powi(2);
        }
        total
    }

    #[test]
    fn loo_shortcut_matches_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let doses = uniform_doses(50, 6);
        let xi: Vec<f64> = doses
            .iter()
            .map(|a| (6.0 * a).cos() + 0.3 * rng.random::<f64>())
            .collect();
        for b in [0.2, 0.3, 0.5] {
            for kernel in [SmoothingKernel::Epanechnikov, SmoothingKernel::Gaussian] {
                let short = loo_criterion(&xi, &doses, b, kernel).unwrap();
                let long = explicit_loo(&xi, &doses, b, kernel);
                assert!(
                    (short - long).abs() <= 1e-6 * (1.0 + long),
                    "{short} vs {long}"
                );
            }
        }
    }

    #[test]
    fn loo_linear_prefers_smallest_valid() {
        let doses = uniform_doses(200, 7);
        let xi: Vec<f64> = doses.iter().map(|a| 1.0 - 2.0 * a).collect();
        let cands = [0.4, 0.001, 0.1, 0.2];
        let b = loo_bandwidth(&xi, &doses, &cands, SmoothingKernel::Epanechnikov).unwrap();
        // 0.001 leaves isolated doses with leverage 1, so it is skipped.
        assert!(loo_criterion(&xi, &doses, 0.001, SmoothingKernel::Epanechnikov).is_none());
        assert_eq!(b, 0.1);
    }

    #[test]
    fn loo_all_skipped_is_error() {
        let doses = vec![0.0, 0.5, 1.0];
        assert!(matches!(
            loo_bandwidth(
                &[1.0, 2.0, 3.0],
                &doses,
                &[0.01],
                SmoothingKernel::Epanechnikov
            ),
            Err(Error::BandwidthSelection)
        ));
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y = (0..n)
            .map(|i| x[[i, 0]] + (a[i] - 0.5).powi(2) + 0.1 * rng.random::<f64>())
            .collect();
        Dataset::new(x, a, y, vec!["x1".into(), "x2".into()], Direction::Maximize).unwrap()
    }

    fn mu(x: &[f64], a: f64) -> f64 {
        x[0] + (a - 0.5).powi(2) + 0.05
    }

    struct TiltedDensity;
    impl DoseDensity for TiltedDensity {
        fn density(&self, a: f64, x: &[f64]) -> f64 {
            1.0 + 0.5 * x[1] * (a - 0.5)
        }
    }

    #[test]
    fn exact_outcome_model_kills_residual() {
        let mut ds = toy_dataset(40, 8);
        let y: Vec<f64> = (0..40).map(|i| mu(ds.row(i), ds.doses()[i])).collect();
        ds = ds.with_outcomes(y).unwrap();
        let k: Vec<f64> = (0..40).map(|j| 0.5 + (j % 3) as f64).collect();
        let xi = dr_pseudo_outcomes(&ds, &mu, &TiltedDensity, &k).unwrap();
        let pre = DrPrecompute::new(&ds, &mu, &TiltedDensity);
        let c = pre.components(&k).unwrap();
        for j in 0..40 {
            assert!((xi[j] - c.m_hat[j] / c.kappa).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_kernel_is_population_mapping() {
        let ds = toy_dataset(30, 9);
        let ones = vec![1.0; 30];
        let pre = DrPrecompute::new(&ds, &mu, &TiltedDensity);
        let c = pre.components(&ones).unwrap();
        assert!((c.kappa - 1.0).abs() < 1e-15);
        let xi = pre.pseudo_outcomes(&ones).unwrap();
        // Population form: (Y - mu)/pi * w(A) + mean_l mu(x_l, A).
        for j in 0..30 {
            let a = ds.doses()[j];
            let w: f64 = (0..30)
                .map(|l| TiltedDensity.density(a, ds.row(l)))
                .sum::<f64>()
                / 30.0;
            let m: f64 = (0..30).map(|l| mu(ds.row(l), a)).sum::<f64>() / 30.0;
            let direct =
                (ds.outcomes()[j] - mu(ds.row(j), a)) / TiltedDensity.density(a, ds.row(j)) * w + m;
            assert!((xi[j] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_scaling_is_invisible() {
        let ds = toy_dataset(50, 10);
        let k: Vec<f64> = (0..50)
            .map(|j| ((j * 7) % 11) as f64 / 10.0 + 0.01)
            .collect();
        let k7: Vec<f64> = k.iter().map(|v| 7.0 * v).collect();
        let a = dr_pseudo_outcomes(&ds, &mu, &TiltedDensity, &k).unwrap();
        let b = dr_pseudo_outcomes(&ds, &mu, &TiltedDensity, &k7).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn zero_kernel_row_is_error() {
        let ds = toy_dataset(20, 11);
        assert!(matches!(
            dr_pseudo_outcomes(&ds, &mu, &TiltedDensity, &[0.0; 20]),
            Err(Error::DegenerateKernel)
        ));
        let mut neg = vec![1.0; 20];
        neg[3] = -1.0;
        assert!(dr_pseudo_outcomes(&ds, &mu, &TiltedDensity, &neg).is_err());
    }

    #[test]
    fn matrix_form_matches_rowwise() {
        let ds = toy_dataset(25, 12);
        let k = Array2::from_shape_fn((25, 25), |(i, j)| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
        let pre = DrPrecompute::new(&ds, &mu, &TiltedDensity);
        let full = pre.pseudo_outcome_matrix(k.view()).unwrap();
        for i in 0..25 {
            let row = pre.pseudo_outcomes(k.row(i).as_slice().unwrap()).unwrap();
            for j in 0..25 {
                assert!((full[[i, j]] - row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_kernel_rows_identical() {
        let ds = toy_dataset(60, 13);
        let k = Array2::from_elem((60, 60), 1.0);
        let grid = DoseGrid::uniform(20).unwrap();
        let cfg = SmootherConfig {
            bandwidth: Bandwidth::Fixed(0.2),
            ..SmootherConfig::default()
        };
        let (curves, diag) =
            estimate_effect_curves(&ds, &mu, &TiltedDensity, k.view(), &grid, &cfg).unwrap();
        assert!(!diag.bandwidth_selected);
        for i in 1..60 {
            for g in 0..20 {
                assert!((curves.value(i, g) - curves.value(0, g)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn minimize_negates_curves() {
        let ds = toy_dataset(60, 14);
        let k = Array2::from_shape_fn((60, 60), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 0.3 });
        let grid = DoseGrid::uniform(15).unwrap();
        let cfg = SmootherConfig {
            bandwidth: Bandwidth::Fixed(0.25),
            ..SmootherConfig::default()
        };
        let (up, _) =
            estimate_effect_curves(&ds, &mu, &TiltedDensity, k.view(), &grid, &cfg).unwrap();
        let down_ds = Dataset::new(
            ds.covariates().clone(),
            ds.doses().to_vec(),
            ds.outcomes().to_vec(),
            ds.feature_names().to_vec(),
            Direction::Minimize,
        )
        .unwrap();
        let (down, _) =
            estimate_effect_curves(&down_ds, &mu, &TiltedDensity, k.view(), &grid, &cfg).unwrap();
        for (u, d) in up.values().iter().zip(down.values()) {
            assert_eq!(*u, -*d);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let ds = toy_dataset(40, 15);
        let k = Array2::from_shape_fn((40, 40), |(i, j)| {
            (-(ds.row(i)[0] - ds.row(j)[0]).powi(2) * 4.0).exp()
        });
        let perm: Vec<usize> = (0..40).map(|i| (i * 17) % 40).collect();
        let pds = ds.select_rows(&perm).unwrap();
        let pk = Array2::from_shape_fn((40, 40), |(i, j)| k[[perm[i], perm[j]]]);
        let grid = DoseGrid::uniform(25).unwrap();
        let cfg = SmootherConfig {
            bandwidth: Bandwidth::Fixed(0.2),
            ..SmootherConfig::default()
        };
        let (c, _) =
            estimate_effect_curves(&ds, &mu, &TiltedDensity, k.view(), &grid, &cfg).unwrap();
        let (pc, _) =
            estimate_effect_curves(&pds, &mu, &TiltedDensity, pk.view(), &grid, &cfg).unwrap();
        for i in 0..40 {
            for g in 0..25 {
                assert!((pc.value(i, g) - c.value(perm[i], g)).abs() < 1e-10);
            }
        }
    }
}
