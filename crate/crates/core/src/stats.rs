//! Small descriptive-statistics helpers shared by the analysis modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Divide-by-n variance.
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

/// Sample quantile definitions 1 to 9 of Hyndman and Fan, numbered as in R's `quantile`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantileType(u8);

impl QuantileType {
    /// Linear interpolation of order statistics, `(n - 1) p + 1`.
    pub const LINEAR: QuantileType = QuantileType(7);

    pub fn new(t: u8) -> Result<Self> {
        if (1..=9).contains(&t) {
            Ok(QuantileType(t))
        } else {
            Err(Error::invalid(format!("quantile type must be in 1..=9, got {t}")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }
}

impl Default for QuantileType {
    fn default() -> Self {
        Self::LINEAR
    }
}

/// Quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64, qtype: QuantileType) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    assert!((0.0..=1.0).contains(&p));
    let nf = n as f64;
    let fuzz = 4.0 * f64::EPSILON;
    // 1-based order statistic with clamping at both ends
    let at = |j: i64| -> f64 { sorted[(j.clamp(1, n as i64) - 1) as usize] };
    let t = qtype.0;
    if t <= 3 {
        let m = if t == 3 { -0.5 } else { 0.0 };
        let npm = nf * p + m;
        let j = (npm + fuzz).floor();
        let g = npm - j;
        let j = j as i64;
        let gamma = match t {
            1 => {
                if g.abs() > fuzz {
                    1.0
                } else {
                    0.0
                }
            }
            2 => {
                if g.abs() > fuzz {
                    1.0
                } else {
                    0.5
                }
            }
            _ => {
                if g.abs() <= fuzz && j % 2 == 0 {
                    0.0
                } else {
                    1.0
                }
            }
        };
        (1.0 - gamma) * at(j) + gamma * at(j + 1)
    } else {
        let m = match t {
            4 => 0.0,
            5 => 0.5,
            6 => p,
            7 => 1.0 - p,
            8 => (p + 1.0) / 3.0,
            _ => p / 4.0 + 3.0 / 8.0,
        };
        let npm = nf * p + m;
        let j = (npm + fuzz).floor();
        let mut h = npm - j;
        if h.abs() < fuzz {
            h = 0.0;
        }
        let j = j as i64;
        let lo = at(j);
        let hi = at(j + 1);
        if h == 0.0 {
            lo
        } else {
            lo + h * (hi - lo)
        }
    }
}

pub fn quantile(xs: &[f64], p: f64, qtype: QuantileType) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p, qtype)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn five_number(xs: &[f64]) -> FiveNumber {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&sorted, p, QuantileType::LINEAR);
    FiveNumber {
        min: sorted[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: sorted[sorted.len() - 1],
    }
}
