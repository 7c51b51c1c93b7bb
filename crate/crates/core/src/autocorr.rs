//! Global Moran's I and local indicators of spatial association.
//!
//! Islands (units without neighbours) are left out of every statistic: the mean and
//! scale of the standardised field, the Moran sum, and the permutation pool.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ranking::HazardMacro;
use crate::rng;
use crate::spatial::SpatialWeights;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StandardizedField {
    /// z-scores for every unit; islands are scaled with the same mean and scale but do
    /// not contribute to them.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Divide-by-n standard deviation over non-island units.
    pub scale: f64,
    pub included: Vec<bool>,
}

pub fn standardize(field: &[f64], weights: &SpatialWeights) -> Result<StandardizedField> {
    if field.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            got: field.len(),
        });
    }
    if let Some(i) = field.iter().position(|x| !x.is_finite()) {
        return Err(Error::domain(format!("non-finite value at unit {}", weights.unit_ids()[i])));
    }
    let included: Vec<bool> = weights.island_flags().iter().map(|f| !f).collect();
    let vals: Vec<f64> = field
        .iter()
        .zip(&included)
        .filter(|(_, inc)| **inc)
        .map(|(x, _)| *x)
        .collect();
    if vals.len() < 2 {
        return Err(Error::Degenerate("fewer than two connected units".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let magnitude = vals.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(var > (f64::EPSILON * magnitude).powi(2) * n) {
        return Err(Error::Degenerate("field has zero variance, Moran's I is undefined".into()));
    }
    let scale = var.sqrt();
    Ok(StandardizedField {
        values: field.iter().map(|x| (x - mean) / scale).collect(),
        mean,
        scale,
        included,
    })
}

fn lag_at(w: &SpatialWeights, z: &[f64], i: usize) -> f64 {
    w.neighbors(i).iter().zip(w.weights(i)).map(|(j, wij)| wij * z[*j]).sum()
}

/// `I = (1/n) sum_i z_i lag(z)_i` over the n connected units.
pub fn morans_i(weights: &SpatialWeights, field: &[f64]) -> Result<f64> {
    let z = standardize(field, weights)?;
    let conn = weights.connected_units();
    let s: f64 = conn.iter().map(|&i| z.values[i] * lag_at(weights, &z.values, i)).sum();
    Ok(s / conn.len() as f64)
}

/// The unsimplified ratio form of Moran's I evaluated on the connected units.
pub fn morans_i_general(weights: &SpatialWeights, field: &[f64]) -> Result<f64> {
    standardize(field, weights)?;
    let conn = weights.connected_units();
    let n = conn.len() as f64;
    let mean = conn.iter().map(|&i| field[i]).sum::<f64>() / n;
    let mut num = 0.0;
    let mut s0 = 0.0;
    for &i in &conn {
        for (j, wij) in weights.neighbors(i).iter().zip(weights.weights(i)) {
            num += (field[i] - mean) * wij * (field[*j] - mean);
            s0 += wij;
        }
    }
    let den: f64 = conn.iter().map(|&i| (field[i] - mean).powi(2)).sum();
    Ok(n / s0 * num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Quadrant {
    HighHigh,
    LowLow,
    LowHigh,
    HighLow,
    Undefined,
}

impl Quadrant {
    pub fn from_signs(z: f64, lag: f64) -> Quadrant {
        match (z.partial_cmp(&0.0), lag.partial_cmp(&0.0)) {
            (Some(std::cmp::Ordering::Greater), Some(std::cmp::Ordering::Greater)) => Quadrant::HighHigh,
            (Some(std::cmp::Ordering::Less), Some(std::cmp::Ordering::Less)) => Quadrant::LowLow,
            (Some(std::cmp::Ordering::Less), Some(std::cmp::Ordering::Greater)) => Quadrant::LowHigh,
            (Some(std::cmp::Ordering::Greater), Some(std::cmp::Ordering::Less)) => Quadrant::HighLow,
            _ => Quadrant::Undefined,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::HighHigh => "HighHigh",
            Quadrant::LowLow => "LowLow",
            Quadrant::LowHigh => "LowHigh",
            Quadrant::HighLow => "HighLow",
            Quadrant::Undefined => "Undefined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LisaResult {
    pub unit_id: String,
    pub z: f64,
    pub lag: Option<f64>,
    pub local_i: Option<f64>,
    pub p_value: Option<f64>,
    pub quadrant: Quadrant,
    pub significant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LisaConfig {
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LisaConfig {
    fn default() -> Self {
        LisaConfig {
            permutations: 999,
            alpha: 0.05,
            seed: 42,
        }
    }
}

const TIE_EPS: f64 = 1e-10;

/// LISA with conditional permutation inference.
///
/// For unit i the value `z_i` stays fixed while the `n_i` neighbour values are drawn
/// without replacement from the other connected units. The pseudo p-value is
/// `(R + 1) / (M + 1)`, R counting permuted lags at least as extreme as the observed
/// lag on its own side of zero. Unit i draws from the stream keyed by `(seed, unit_id)`.
pub fn lisa(weights: &SpatialWeights, field: &[f64], cfg: LisaConfig) -> Result<Vec<LisaResult>> {
    if cfg.permutations < 99 {
        return Err(Error::invalid(format!(
            "at least 99 permutations are required, got {}",
            cfg.permutations
        )));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0,1), got {}", cfg.alpha)));
    }
    let z = standardize(field, weights)?;
    let conn = weights.connected_units();
    let mut pool_pos = vec![usize::MAX; weights.len()];
    for (k, &i) in conn.iter().enumerate() {
        pool_pos[i] = k;
    }
    let pool: Vec<f64> = conn.iter().map(|&i| z.values[i]).collect();
    let m = cfg.permutations;

    let results: Vec<LisaResult> = (0..weights.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(pool.len()),
            |scratch: &mut Vec<f64>, i| {
                let unit_id = weights.unit_ids()[i].clone();
                let zi = z.values[i];
                if weights.is_island(i) {
                    return LisaResult {
                        unit_id,
                        z: zi,
                        lag: None,
                        local_i: None,
                        p_value: None,
                        quadrant: Quadrant::Undefined,
                        significant: false,
                    };
                }
                let lag = lag_at(weights, &z.values, i);
                scratch.clear();
                let k = pool_pos[i];
                scratch.extend_from_slice(&pool[..k]);
                scratch.extend_from_slice(&pool[k + 1..]);
                let w = weights.weights(i);
                let mut rng = rng::stream(cfg.seed, "lisa", unit_id.as_bytes());
                let upper = lag >= 0.0;
                // permuted sums of the same values in another order must count as ties
                let slack = TIE_EPS * (1.0 + lag.abs());
                let mut extreme = 0usize;
                for _ in 0..m {
                    let perm_lag = sampled_lag(scratch, w, &mut rng);
                    if (upper && perm_lag >= lag - slack) || (!upper && perm_lag <= lag + slack) {
                        extreme += 1;
                    }
                }
                let p = (extreme + 1) as f64 / (m + 1) as f64;
                LisaResult {
                    unit_id,
                    z: zi,
                    lag: Some(lag),
                    local_i: Some(zi * lag),
                    p_value: Some(p),
                    quadrant: Quadrant::from_signs(zi, lag),
                    significant: p <= cfg.alpha,
                }
            },
        )
        .collect();
    Ok(results)
}

/// Weighted sum of `w.len()` values drawn without replacement from `pool`
/// (partial Fisher-Yates; `pool` is left permuted).
fn sampled_lag(pool: &mut [f64], w: &[f64], rng: &mut rng::StreamRng) -> f64 {
    use rand::Rng;
    let len = pool.len();
    let mut s = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let j = rng.random_range(k..len);
        pool.swap(k, j);
        s += wk * pool[k];
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratifiedHotspot {
    pub unit_id: String,
    pub base_class: Quadrant,
    pub hazard_macro: HazardMacro,
}

/// Significant High-High and Low-Low units, split by the hazard macro class.
pub fn stratify(lisa: &[LisaResult], hazard: &[f64]) -> Result<Vec<StratifiedHotspot>> {
    if lisa.len() != hazard.len() {
        return Err(Error::LengthMismatch {
            expected: lisa.len(),
            got: hazard.len(),
        });
    }
    Ok(lisa
        .iter()
        .zip(hazard)
        .filter(|(r, _)| r.significant && matches!(r.quadrant, Quadrant::HighHigh | Quadrant::LowLow))
        .map(|(r, ag)| StratifiedHotspot {
            unit_id: r.unit_id.clone(),
            base_class: r.quadrant,
            hazard_macro: HazardMacro::from_ag_max(*ag),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i:02}")).collect()
    }

    fn weights(n: usize, edges: &[(usize, usize)]) -> SpatialWeights {
        let u = ids(n);
        let pairs: Vec<_> = edges.iter().map(|(a, b)| (u[*a].clone(), u[*b].clone())).collect();
        SpatialWeights::from_pairs(&u, &pairs).unwrap()
    }

    #[test]
    fn two_point_standardization() {
        let w = weights(2, &[(0, 1)]);
        let z = standardize(&[0.0, 2.0], &w).unwrap();
        assert_eq!(z.values, vec![-1.0, 1.0]);
        assert_eq!(z.mean, 1.0);
        assert_eq!(z.scale, 1.0);
    }

    #[test]
    fn constant_field_is_degenerate() {
        let w = weights(3, &[(0, 1), (1, 2)]);
        assert!(matches!(standardize(&[4.0; 3], &w), Err(Error::Degenerate(_))));
        assert!(matches!(morans_i(&w, &[4.0; 3]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn two_adjacent_units_give_minus_one() {
        let w = weights(2, &[(0, 1)]);
        assert_eq!(morans_i(&w, &[0.0, 2.0]).unwrap(), -1.0);
        assert!((morans_i_general(&w, &[0.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn islands_are_excluded() {
        let w = weights(4, &[(0, 1), (1, 2)]);
        let a = morans_i(&w, &[1.0, 2.0, 4.0, 1000.0]).unwrap();
        let w3 = weights(3, &[(0, 1), (1, 2)]);
        let b = morans_i(&w3, &[1.0, 2.0, 4.0]).unwrap();
        assert!((a - b).abs() < 1e-14);
        let res = lisa(&w, &[1.0, 2.0, 4.0, 1000.0], LisaConfig::default()).unwrap();
        assert_eq!(res[3].quadrant, Quadrant::Undefined);
        assert_eq!(res[3].p_value, None);
        assert!(!res[3].significant);
    }

    #[test]
    fn quadrant_signs() {
        assert_eq!(Quadrant::from_signs(1.0, 2.0), Quadrant::HighHigh);
        assert_eq!(Quadrant::from_signs(-1.0, -2.0), Quadrant::LowLow);
        assert_eq!(Quadrant::from_signs(-1.0, 2.0), Quadrant::LowHigh);
        assert_eq!(Quadrant::from_signs(1.0, -2.0), Quadrant::HighLow);
        assert_eq!(Quadrant::from_signs(0.0, 1.0), Quadrant::Undefined);
    }

    #[test]
    fn lisa_argument_checks() {
        let w = weights(3, &[(0, 1), (1, 2)]);
        let f = [1.0, 2.0, 3.0];
        assert!(lisa(&w, &f, LisaConfig { permutations: 98, ..Default::default() }).is_err());
        assert!(lisa(&w, &f, LisaConfig { alpha: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn stratification() {
        let mk = |q, sig| LisaResult {
            unit_id: "x".into(),
            z: 0.0,
            lag: Some(0.0),
            local_i: Some(0.0),
            p_value: Some(0.01),
            quadrant: q,
            significant: sig,
        };
        let l = vec![
            mk(Quadrant::HighHigh, true),
            mk(Quadrant::LowLow, true),
            mk(Quadrant::LowHigh, true),
            mk(Quadrant::HighHigh, false),
        ];
        let s = stratify(&l, &[0.2, 0.05, 0.3, 0.3]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].base_class, s[0].hazard_macro), (Quadrant::HighHigh, HazardMacro::Severe));
        assert_eq!((s[1].base_class, s[1].hazard_macro), (Quadrant::LowLow, HazardMacro::Mild));
        let edge = stratify(&l[..1], &[0.15]).unwrap();
        assert_eq!(edge[0].hazard_macro, HazardMacro::Mild);
    }
}
