//! Log proportional-growth curves, cubic B-spline smoothing and functional PCA.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{Dataset, POP_FIRST_YEAR, POP_LAST_YEAR, POP_YEARS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthCurve {
    pub unit_id: String,
    pub years: Vec<i32>,
    /// `ln(pop_t / pop_1992)`; the first entry is exactly zero.
    pub log_growth: Vec<f64>,
}

/// Log growth relative to the first year for a single series of positive counts.
pub fn log_growth_series(counts: &[u64]) -> Result<Vec<f64>> {
    let base = *counts.first().ok_or_else(|| Error::invalid("empty population series"))?;
    if counts.contains(&0) {
        return Err(Error::domain("population series contains a zero count"));
    }
    let base = base as f64;
    Ok(counts.iter().map(|c| (*c as f64 / base).ln()).collect())
}

/// Growth curves for every unit with a complete, positive 1992-2012 series.
/// Other units are skipped and reported in the returned warnings.
pub fn log_growth(ds: &Dataset) -> (Vec<GrowthCurve>, Vec<String>) {
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for r in ds.records() {
        let Some(s) = &r.pop_series else {
            warnings.push(format!("{}: no population series, skipped", r.unit_id));
            continue;
        };
        if !s.is_complete() {
            warnings.push(format!(
                "{}: population series does not cover {POP_FIRST_YEAR}-{POP_LAST_YEAR}, skipped",
                r.unit_id
            ));
            continue;
        }
        match log_growth_series(&s.counts) {
            Ok(log_growth) => curves.push(GrowthCurve {
                unit_id: r.unit_id.clone(),
                years: s.years.clone(),
                log_growth,
            }),
            Err(e) => warnings.push(format!("{}: {e}, skipped", r.unit_id)),
        }
    }
    (curves, warnings)
}

/// Clamped B-spline basis with equally spaced interior knots.
#[derive(Debug, Clone)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    order: usize,
    n_basis: usize,
}

impl BSplineBasis {
    pub fn new(lo: f64, hi: f64, n_basis: usize, order: usize) -> Result<Self> {
        if !(hi > lo) || order == 0 || n_basis < order {
            return Err(Error::invalid("invalid B-spline basis parameters"));
        }
        let interior = n_basis - order;
        let mut knots = vec![lo; order];
        for k in 1..=interior {
            knots.push(lo + (hi - lo) * k as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(hi, order));
        Ok(BSplineBasis { knots, order, n_basis })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Values of all basis functions at `x` (Cox-de Boor recursion).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let t = &self.knots;
        let lo = t[0];
        let hi = t[t.len() - 1];
        let x = x.clamp(lo, hi);
        // order-1 indicators on half-open spans, the last span closed on the right
        let spans = t.len() - 1;
        let mut b: Vec<f64> = (0..spans)
            .map(|i| {
                let inside = if x == hi {
                    t[i] < t[i + 1] && t[i + 1] == hi
                } else {
                    t[i] <= x && x < t[i + 1]
                };
                if inside {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for k in 2..=self.order {
            let next: Vec<f64> = (0..t.len() - k)
                .map(|i| {
                    let mut v = 0.0;
                    let d1 = t[i + k - 1] - t[i];
                    if d1 > 0.0 {
                        v += (x - t[i]) / d1 * b[i];
                    }
                    let d2 = t[i + k] - t[i + 1];
                    if d2 > 0.0 {
                        v += (t[i + k] - x) / d2 * b[i + 1];
                    }
                    v
                })
                .collect();
            b = next;
        }
        b.truncate(self.n_basis);
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothedCurve {
    pub unit_id: String,
    pub fitted: Vec<f64>,
    pub coefficients: Vec<f64>,
}

/// Least-squares projection onto a B-spline basis evaluated on a fixed grid.
#[derive(Debug, Clone)]
pub struct BSplineSmoother {
    basis: BSplineBasis,
    grid: Vec<f64>,
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl BSplineSmoother {
    pub fn new(basis: BSplineBasis, grid: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        let p = basis.n_basis();
        if n < p {
            return Err(Error::invalid("fewer grid points than basis functions"));
        }
        let mut design = DMatrix::zeros(n, p);
        for (i, x) in grid.iter().enumerate() {
            for (j, v) in basis.eval(*x).into_iter().enumerate() {
                design[(i, j)] = v;
            }
        }
        let gram = design.transpose() * &design;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("B-spline design matrix is rank deficient".into()))?;
        let pinv = chol.solve(&design.transpose());
        Ok(BSplineSmoother { basis, grid, design, pinv })
    }

    /// Eleven cubic B-splines on the yearly 1992-2012 grid.
    pub fn yearly() -> Self {
        let lo = POP_FIRST_YEAR as f64;
        let hi = POP_LAST_YEAR as f64;
        let basis = BSplineBasis::new(lo, hi, 11, 4).expect("static basis");
        let grid = (0..POP_YEARS).map(|k| lo + k as f64).collect();
        Self::new(basis, grid).expect("full-rank static design")
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn smooth_values(&self, values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if values.len() != self.grid.len() {
            return Err(Error::LengthMismatch {
                expected: self.grid.len(),
                got: values.len(),
            });
        }
        let y = DVector::from_column_slice(values);
        let coef = &self.pinv * y;
        let fit = &self.design * &coef;
        Ok((fit.iter().cloned().collect(), coef.iter().cloned().collect()))
    }

    pub fn smooth(&self, curve: &GrowthCurve) -> Result<SmoothedCurve> {
        let (fitted, coefficients) = self.smooth_values(&curve.log_growth)?;
        Ok(SmoothedCurve {
            unit_id: curve.unit_id.clone(),
            fitted,
            coefficients,
        })
    }
}

/// Smooths one curve with the eleven-function cubic basis on the yearly grid.
pub fn smooth_bspline(curve: &GrowthCurve) -> Result<SmoothedCurve> {
    BSplineSmoother::yearly().smooth(curve)
}

pub fn smooth_all(curves: &[GrowthCurve]) -> Result<Vec<SmoothedCurve>> {
    let smoother = BSplineSmoother::yearly();
    curves.par_iter().map(|c| smoother.smooth(c)).collect()
}

/// Trapezoidal quadrature weights on an arbitrary increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = grid[k + 1] - grid[k];
        w[k] += h / 2.0;
        w[k + 1] += h / 2.0;
    }
    w
}

#[derive(Debug, Clone, Serialize)]
pub struct FpcaResult {
    pub unit_ids: Vec<String>,
    pub grid: Vec<f64>,
    pub mean_curve: Vec<f64>,
    /// Component curves on the grid, orthonormal under the trapezoidal inner product.
    pub harmonics: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained: Vec<f64>,
    pub degenerate: bool,
}

impl FpcaResult {
    pub fn pc1_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.first().copied().unwrap_or(0.0)).collect()
    }
}

/// Functional PCA of curves sampled on `grid` with trapezoidal weights.
///
/// Component 1 is oriented so that its scores correlate positively with the curve
/// values at the last grid point (growing curves score high).
pub fn fpca_on_grid(unit_ids: Vec<String>, curves: &[Vec<f64>], grid: &[f64]) -> Result<FpcaResult> {
    let n = curves.len();
    if n < 2 {
        return Err(Error::invalid("functional PCA needs at least two curves"));
    }
    if unit_ids.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: unit_ids.len() });
    }
    let t = grid.len();
    for c in curves {
        if c.len() != t {
            return Err(Error::LengthMismatch { expected: t, got: c.len() });
        }
    }
    let w = trapezoid_weights(grid);
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let mean_curve: Vec<f64> = (0..t).map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / n as f64).collect();
    let mut y = DMatrix::zeros(n, t);
    for (i, c) in curves.iter().enumerate() {
        for k in 0..t {
            y[(i, k)] = (c[k] - mean_curve[k]) * sw[k];
        }
    }
    let cov = y.transpose() * &y / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let degenerate = lmax <= 1e-24;
    let keep: Vec<usize> = if degenerate {
        Vec::new()
    } else {
        order
            .iter()
            .copied()
            .take(n - 1)
            .filter(|&c| eig.eigenvalues[c] > lmax * 1e-10)
            .collect()
    };
    let total: f64 = keep.iter().map(|&c| eig.eigenvalues[c]).sum();
    let mut harmonics = Vec::with_capacity(keep.len());
    let mut eigenvalues = Vec::with_capacity(keep.len());
    for &c in &keep {
        let u = eig.eigenvectors.column(c);
        let mut phi: Vec<f64> = (0..t).map(|k| u[k] / sw[k]).collect();
        let big = u.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            phi.iter_mut().for_each(|v| *v = -*v);
        }
        harmonics.push(phi);
        eigenvalues.push(eig.eigenvalues[c]);
    }
    let score = |i: usize, phi: &[f64]| -> f64 {
        (0..t).map(|k| w[k] * (curves[i][k] - mean_curve[k]) * phi[k]).sum()
    };
    let mut scores: Vec<Vec<f64>> = (0..n).map(|i| harmonics.iter().map(|h| score(i, h)).collect()).collect();
    if let Some(h1) = harmonics.first_mut() {
        let s1: Vec<f64> = scores.iter().map(|s| s[0]).collect();
        let ends: Vec<f64> = curves.iter().map(|c| c[t - 1]).collect();
        let cov_end: f64 = {
            let ms = s1.iter().sum::<f64>() / n as f64;
            let me = ends.iter().sum::<f64>() / n as f64;
            s1.iter().zip(&ends).map(|(a, b)| (a - ms) * (b - me)).sum()
        };
        if cov_end < 0.0 {
            h1.iter_mut().for_each(|v| *v = -*v);
            scores.iter_mut().for_each(|s| s[0] = -s[0]);
        }
    }
    let explained = eigenvalues.iter().map(|l| l / total).collect();
    Ok(FpcaResult {
        unit_ids,
        grid: grid.to_vec(),
        mean_curve,
        harmonics,
        scores,
        eigenvalues,
        explained,
        degenerate,
    })
}

/// Functional PCA of smoothed growth curves on the yearly grid.
pub fn fpca(curves: &[SmoothedCurve]) -> Result<FpcaResult> {
    let grid: Vec<f64> = (0..POP_YEARS).map(|k| POP_FIRST_YEAR as f64 + k as f64).collect();
    let ids = curves.iter().map(|c| c.unit_id.clone()).collect();
    let values: Vec<Vec<f64>> = curves.iter().map(|c| c.fitted.clone()).collect();
    fpca_on_grid(ids, &values, &grid)
}
