//! Synthetic lattice datasets with spatially structured indicators, used by tests,
//! benchmarks and the CLI smoke runs.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::ingest::{Dataset, PopSeries, RawRecord, DEFAULT_ZERO_DELTA_FACTOR, POP_FIRST_YEAR, POP_YEARS};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    /// Side of the square blocks of cells forming one province.
    pub province_side: usize,
    pub seed: u64,
    pub population: bool,
    /// Probability that a building-stock class is empty.
    pub zero_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 20,
            cols: 20,
            province_side: 5,
            seed: 7,
            population: true,
            zero_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Queen-contiguity pairs of the lattice.
    pub pairs: Vec<(String, String)>,
}

pub fn unit_id(r: usize, c: usize) -> String {
    format!("U{r:03}{c:03}")
}

fn latent(r: usize, c: usize, rows: usize, cols: usize) -> f64 {
    let x = c as f64 / cols.max(1) as f64;
    let y = r as f64 / rows.max(1) as f64;
    (2.0 * std::f64::consts::PI * x).sin() + (3.0 * y).cos() + (x - y)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    let mut rng = rng::stream(cfg.seed, "synth", b"lattice");
    let mut rows = Vec::with_capacity(cfg.rows * cfg.cols);
    let side = cfg.province_side.max(1);
    let prov_cols = cfg.cols.div_ceil(side);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let l = latent(r, c, cfg.rows, cfg.cols);
            let mut noise = || rng.sample::<f64, _>(StandardNormal);
            let ivsm = 100.0 + 2.5 * l + 0.8 * noise();
            let var_perc = -2.0 - 3.0 * l + 1.5 * noise();
            let eta_q3 = 62.0 + 2.0 * l + 1.0 * noise();
            let ag_max = 0.02 + 0.33 * (c as f64 + 0.5) / cfg.cols as f64;
            // older stock where the latent field is high
            let mut shares = [0.0; 9];
            for (j, s) in shares.iter_mut().enumerate() {
                let tilt = (4.0 - j as f64) * 0.25 * l;
                *s = (tilt + 0.6 * noise()).exp();
            }
            for s in shares.iter_mut() {
                if rng.random::<f64>() < cfg.zero_rate {
                    *s = 0.0;
                }
            }
            if shares.iter().all(|s| *s == 0.0) {
                shares[4] = 1.0;
            }
            let pop = 200 + (rng.random::<f64>() * 20_000.0) as u64;
            let pop_series = cfg.population.then(|| {
                let rate = var_perc / 700.0;
                let years: Vec<i32> = (0..POP_YEARS as i32).map(|k| POP_FIRST_YEAR + k).collect();
                let base = pop as f64;
                let counts = (0..POP_YEARS)
                    .map(|k| {
                        let wiggle = 1.0 + 0.002 * rng.sample::<f64, _>(StandardNormal);
                        (base * (rate * k as f64).exp() * wiggle).round().max(1.0) as u64
                    })
                    .collect();
                PopSeries { years, counts }
            });
            let province = (r / side) * prov_cols + c / side;
            rows.push(RawRecord {
                unit_id: unit_id(r, c),
                name: format!("Cell {r}-{c}"),
                province_id: format!("P{province:03}"),
                region_id: format!("R{}", province / 4),
                ag_max,
                ivsm,
                var_perc,
                eta_q3,
                pop,
                building_shares: shares,
                pop_series,
            });
        }
    }
    let dataset = Dataset::from_raw(rows, DEFAULT_ZERO_DELTA_FACTOR)?;
    Ok(SynthData {
        dataset,
        pairs: lattice_pairs(cfg.rows, cfg.cols, false),
    })
}

/// Contiguity pairs of a rows x cols lattice; queen unless `rook`.
pub fn lattice_pairs(rows: usize, cols: usize, rook: bool) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut push = |r2: usize, c2: usize| out.push((unit_id(r, c), unit_id(r2, c2)));
            if c + 1 < cols {
                push(r, c + 1);
            }
            if r + 1 < rows {
                push(r + 1, c);
                if !rook {
                    if c + 1 < cols {
                        push(r + 1, c + 1);
                    }
                    if c > 0 {
                        push(r + 1, c - 1);
                    }
                }
            }
        }
    }
    out
}

/// Unit squares of the lattice as a GeoJSON feature collection with an `id` property.
pub fn lattice_geojson(rows: usize, cols: usize) -> String {
    let mut s = String::from("{\"type\":\"FeatureCollection\",\"features\":[");
    let mut first = true;
    for r in 0..rows {
        for c in 0..cols {
            if !first {
                s.push(',');
            }
            first = false;
            let (x, y) = (c as f64, r as f64);
            write!(
                s,
                "{{\"type\":\"Feature\",\"properties\":{{\"id\":\"{}\"}},\"geometry\":{{\"type\":\"Polygon\",\"coordinates\":[[[{x},{y}],[{},{y}],[{},{}],[{x},{}],[{x},{y}]]]}}}}",
                unit_id(r, c),
                x + 1.0,
                x + 1.0,
                y + 1.0,
                y + 1.0
            )
            .expect("write to string");
        }
    }
    s.push_str("]}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_shape() {
        let d = generate(&SynthConfig { rows: 4, cols: 6, ..Default::default() }).unwrap();
        assert_eq!(d.dataset.len(), 24);
        // queen lattice: horizontal + vertical + 2 diagonals
        assert_eq!(d.pairs.len(), 4 * 5 + 3 * 6 + 2 * 3 * 5);
        assert_eq!(lattice_pairs(4, 6, true).len(), 4 * 5 + 3 * 6);
        assert!(d.dataset.records().iter().all(|r| r.pop_series.as_ref().unwrap().is_complete()));
    }

    #[test]
    fn reproducible() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a.dataset.digest(), b.dataset.digest());
        let c = generate(&SynthConfig { seed: 8, ..Default::default() }).unwrap();
        assert_ne!(a.dataset.digest(), c.dataset.digest());
    }
}
