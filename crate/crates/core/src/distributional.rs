//! Province distributions of IVSM, Gaussian KDE, 1-D Wasserstein distances and
//! Ward clustering.

use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::ingest::Dataset;

pub const DEFAULT_GRID_SIZE: usize = 1000;
pub const DEFAULT_BANDWIDTH: f64 = 0.527;
/// Points of the default density output grid.
pub const DENSITY_POINTS: usize = 512;
/// Bandwidths of padding beyond the sample range for the density grid.
pub const DENSITY_CUT: f64 = 4.0;

/// Probability grid `t_k = (k - 1/2) / K`.
pub fn probability_grid(k: usize) -> Vec<f64> {
    (1..=k).map(|i| (i as f64 - 0.5) / k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCurve {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvinceDistribution {
    pub province_id: String,
    pub values: Vec<f64>,
    /// Quantile function on the midpoint grid.
    pub quantile_fn: Vec<f64>,
    pub density: Option<DensityCurve>,
}

impl ProvinceDistribution {
    pub fn new(province_id: impl Into<String>, values: Vec<f64>, k: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("distribution with no values"));
        }
        if k < 2 {
            return Err(Error::invalid("quantile grid needs at least 2 points"));
        }
        let quantile_fn = empirical_quantile_fn(&values, k);
        Ok(ProvinceDistribution {
            province_id: province_id.into(),
            values,
            quantile_fn,
            density: None,
        })
    }

    /// Same distribution but with quantiles of the KDE-smoothed law.
    pub fn smoothed(&self, bandwidth: f64) -> Result<Self> {
        let quantile_fn = smoothed_quantile_fn(&self.values, bandwidth, self.grid_size())?;
        Ok(ProvinceDistribution {
            quantile_fn,
            ..self.clone()
        })
    }

    pub fn with_density(mut self, bandwidth: f64) -> Result<Self> {
        let grid = density_grid(&self.values, bandwidth, DENSITY_POINTS);
        let density = kde(&self.values, bandwidth, &grid)?;
        self.density = Some(DensityCurve {
            x: grid,
            density,
            bandwidth,
        });
        Ok(self)
    }

    pub fn grid_size(&self) -> usize {
        self.quantile_fn.len()
    }
}

/// Generalized inverse of the ECDF, `inf{x : F(x) >= t}`, on the midpoint grid.
pub fn empirical_quantile_fn(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // ceil(n t_k) computed exactly in integers
    (1..=k)
        .map(|i| {
            let num = n * (2 * i - 1);
            let idx = num.div_ceil(2 * k);
            sorted[idx.max(1) - 1]
        })
        .collect()
}

pub fn province_distributions(ds: &Dataset, k: usize) -> Result<(Vec<ProvinceDistribution>, Vec<String>)> {
    if ds.province_index().is_empty() {
        return Err(Error::invalid("dataset has no provinces"));
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (province, units) in ds.province_index() {
        let values: Vec<f64> = units
            .iter()
            .filter_map(|u| ds.get(u))
            .map(|r| r.ivsm)
            .filter(|v| v.is_finite())
            .collect();
        if values.is_empty() {
            warnings.push(format!("province {province} has no usable values, skipped"));
            continue;
        }
        out.push(ProvinceDistribution::new(province.clone(), values, k)?);
    }
    Ok((out, warnings))
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Equispaced grid covering the sample range padded by `DENSITY_CUT` bandwidths.
pub fn density_grid(values: &[f64], bandwidth: f64, points: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - DENSITY_CUT * bandwidth;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + DENSITY_CUT * bandwidth;
    let points = points.max(2);
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Gaussian kernel density estimate evaluated at `grid`.
pub fn kde(values: &[f64], bandwidth: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("density of an empty sample"));
    }
    let norm = 1.0 / (values.len() as f64 * bandwidth);
    Ok(grid
        .iter()
        .map(|&x| norm * values.iter().map(|&v| std_normal_pdf((x - v) / bandwidth)).sum::<f64>())
        .collect())
}

fn mixture_cdf(values: &[f64], h: f64, x: f64) -> (f64, f64) {
    let mut c = 0.0;
    let mut d = 0.0;
    for &v in values {
        let z = (x - v) / h;
        c += std_normal_cdf(z);
        d += std_normal_pdf(z);
    }
    let n = values.len() as f64;
    (c / n, d / (n * h))
}

/// Quantiles of the Gaussian-mixture law behind the KDE, by safeguarded Newton.
pub fn smoothed_quantile_fn(values: &[f64], bandwidth: f64, k: usize) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("quantiles of an empty sample"));
    }
    let lo0 = values.iter().copied().fold(f64::INFINITY, f64::min) - 12.0 * bandwidth;
    let hi0 = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0 * bandwidth;
    let mut out = Vec::with_capacity(k);
    let mut lo = lo0;
    for t in probability_grid(k) {
        let mut a = lo;
        let mut b = hi0;
        let mut x = 0.5 * (a + b);
        for _ in 0..200 {
            let (c, d) = mixture_cdf(values, bandwidth, x);
            let r = c - t;
            if r.abs() < 1e-13 {
                break;
            }
            if r < 0.0 {
                a = x;
            } else {
                b = x;
            }
            let newton = if d > 0.0 { x - r / d } else { f64::NAN };
            x = if newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
            if b - a < 1e-12 {
                break;
            }
        }
        out.push(x);
        lo = x.min(hi0);
    }
    Ok(out)
}

/// Order-2 Wasserstein distance by the midpoint rule on the quantile grid.
pub fn wasserstein(p: &ProvinceDistribution, q: &ProvinceDistribution) -> Result<f64> {
    wasserstein_quantiles(&p.quantile_fn, &q.quantile_fn)
}

pub fn wasserstein_quantiles(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::invalid("empty quantile grid"));
    }
    let ss: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / p.len() as f64).sqrt())
}

pub fn distance_matrix(dists: &[ProvinceDistribution]) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = dists.first() {
        if let Some(bad) = dists.iter().find(|d| d.grid_size() != first.grid_size()) {
            return Err(Error::LengthMismatch {
                expected: first.grid_size(),
                got: bad.grid_size(),
            });
        }
    }
    let n = dists.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| wasserstein(&dists[i], &dists[j]).expect("grids checked"))
                .collect()
        })
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &d) in row.iter().enumerate() {
            let j = i + 1 + off;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Merge {
    /// Cluster ids: leaves are `0..n`, the cluster formed at step s is `n + s`.
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dendrogram {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
    pub leaf_order: Vec<usize>,
}

/// Agglomerative clustering with Ward linkage on squared input distances.
pub fn ward_cluster(dist: &[Vec<f64>]) -> Result<Dendrogram> {
    let n = dist.len();
    if n == 0 {
        return Err(Error::invalid("empty distance matrix"));
    }
    for (i, row) in dist.iter().enumerate() {
        if row.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: row.len() });
        }
        if row[i] != 0.0 {
            return Err(Error::invalid(format!("nonzero diagonal at {i}")));
        }
        for (j, &d) in row.iter().enumerate() {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::invalid(format!("invalid distance at ({i}, {j})")));
            }
            let t = dist[j][i];
            if (d - t).abs() > 1e-12 * d.abs().max(t.abs()).max(1.0) {
                return Err(Error::invalid(format!("asymmetric distance matrix at ({i}, {j})")));
            }
        }
    }
    let total = 2 * n - 1;
    let mut d2 = vec![vec![0.0; total]; total];
    for i in 0..n {
        for j in 0..n {
            d2[i][j] = dist[i][j] * dist[i][j];
        }
    }
    let mut size = vec![1usize; total];
    let mut min_leaf: Vec<usize> = (0..total).collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    let mut children = vec![None; total];
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize, (usize, usize))> = None;
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                let key = (min_leaf[a].min(min_leaf[b]), min_leaf[a].max(min_leaf[b]));
                let d = d2[a][b];
                let better = match best {
                    None => true,
                    Some((bd, _, _, bk)) => d < bd || (d == bd && key < bk),
                };
                if better {
                    best = Some((d, a, b, key));
                }
            }
        }
        let (dab, a, b, _) = best.expect("at least two active clusters");
        let (a, b) = if min_leaf[a] <= min_leaf[b] { (a, b) } else { (b, a) };
        let c = n + step;
        size[c] = size[a] + size[b];
        min_leaf[c] = min_leaf[a].min(min_leaf[b]);
        active.retain(|&x| x != a && x != b);
        for &k in &active {
            let (na, nb, nk) = (size[a] as f64, size[b] as f64, size[k] as f64);
            let v = ((na + nk) * d2[k][a] + (nb + nk) * d2[k][b] - nk * dab) / (na + nb + nk);
            let v = v.max(0.0);
            d2[k][c] = v;
            d2[c][k] = v;
        }
        active.push(c);
        children[c] = Some((a, b));
        merges.push(Merge {
            a,
            b,
            height: dab.sqrt(),
            size: size[c],
        });
    }
    let mut leaf_order = Vec::with_capacity(n);
    let mut stack = vec![total - 1];
    while let Some(node) = stack.pop() {
        match children[node] {
            Some((a, b)) => {
                stack.push(b);
                stack.push(a);
            }
            None => leaf_order.push(node),
        }
    }
    Ok(Dendrogram {
        n_leaves: n,
        merges,
        leaf_order,
    })
}

impl Dendrogram {
    /// Labels `0..k` after undoing the last `k - 1` merges; clusters are numbered by
    /// their smallest leaf.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.n_leaves;
        if k == 0 || k > n {
            return Err(Error::invalid(format!("cut into {k} clusters of {n} leaves")));
        }
        let mut parent: Vec<usize> = (0..2 * n - 1).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (s, m) in self.merges.iter().take(n - k).enumerate() {
            let c = n + s;
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = c;
            parent[rb] = c;
        }
        let mut label_of_root = std::collections::HashMap::new();
        let mut labels = vec![0; n];
        for (leaf, label) in labels.iter_mut().enumerate() {
            let r = find(&mut parent, leaf);
            let next = label_of_root.len();
            *label = *label_of_root.entry(r).or_insert(next);
        }
        Ok(labels)
    }

    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub label: usize,
    pub members: Vec<String>,
    pub barycenter: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

/// Value of a quantile function tabulated on the midpoint grid at probability `p`,
/// linear between grid points and flat beyond the ends.
pub fn quantile_at(qf: &[f64], p: f64) -> f64 {
    let k = qf.len();
    let pos = p * k as f64 - 0.5;
    if pos <= 0.0 {
        return qf[0];
    }
    if pos >= (k - 1) as f64 {
        return qf[k - 1];
    }
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    qf[lo] + frac * (qf[lo + 1] - qf[lo])
}

/// Barycenters (pointwise mean quantile functions) and their summary indices.
pub fn cluster_summary(labels: &[usize], dists: &[ProvinceDistribution]) -> Result<Vec<ClusterSummary>> {
    if labels.len() != dists.len() {
        return Err(Error::LengthMismatch {
            expected: dists.len(),
            got: labels.len(),
        });
    }
    if dists.is_empty() {
        return Ok(Vec::new());
    }
    let k = dists[0].grid_size();
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(n_clusters);
    for label in 0..n_clusters {
        let members: Vec<&ProvinceDistribution> = labels
            .iter()
            .zip(dists)
            .filter(|(l, _)| **l == label)
            .map(|(_, d)| d)
            .collect();
        assert!(!members.is_empty(), "cluster {label} has no members");
        let mut bary = vec![0.0; k];
        for d in &members {
            if d.grid_size() != k {
                return Err(Error::LengthMismatch { expected: k, got: d.grid_size() });
            }
            for (b, q) in bary.iter_mut().zip(&d.quantile_fn) {
                *b += q;
            }
        }
        let m = members.len() as f64;
        bary.iter_mut().for_each(|b| *b /= m);
        let mean = bary.iter().sum::<f64>() / k as f64;
        let var = bary.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / k as f64;
        out.push(ClusterSummary {
            label,
            members: members.iter().map(|d| d.province_id.clone()).collect(),
            mean,
            sd: var.sqrt(),
            q1: quantile_at(&bary, 0.25),
            q2: quantile_at(&bary, 0.5),
            q3: quantile_at(&bary, 0.75),
            barycenter: bary,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_quantiles() {
        let d = ProvinceDistribution::new("p", vec![110.0, 90.0], 1000).unwrap();
        let grid = probability_grid(1000);
        for (t, q) in grid.iter().zip(&d.quantile_fn) {
            assert_eq!(*q, if *t < 0.5 { 90.0 } else { 110.0 });
        }
        let single = ProvinceDistribution::new("s", vec![101.5], 10).unwrap();
        assert!(single.quantile_fn.iter().all(|q| *q == 101.5));
        assert!(ProvinceDistribution::new("e", vec![], 10).is_err());
        assert!(ProvinceDistribution::new("e", vec![1.0], 1).is_err());
    }

    #[test]
    fn quantiles_match_ecdf_inversion() {
        let values = [3.2, -1.0, 7.5, 0.4, 0.4, 11.0, 2.0];
        let qf = empirical_quantile_fn(&values, 50);
        for (t, q) in probability_grid(50).iter().zip(&qf) {
            // smallest sample value whose ECDF reaches t
            let mut best = f64::INFINITY;
            for &x in &values {
                let f = values.iter().filter(|v| **v <= x).count() as f64 / values.len() as f64;
                if f >= *t {
                    best = best.min(x);
                }
            }
            assert_eq!(*q, best);
        }
    }

    #[test]
    fn point_mass_distance() {
        let a = ProvinceDistribution::new("a", vec![3.0; 4], 100).unwrap();
        let b = ProvinceDistribution::new("b", vec![-1.5], 100).unwrap();
        assert!((wasserstein(&a, &b).unwrap() - 4.5).abs() < 1e-12);
        assert_eq!(wasserstein(&a, &a).unwrap(), 0.0);
        let c = ProvinceDistribution::new("c", vec![0.0], 50).unwrap();
        assert!(wasserstein(&a, &c).is_err());
    }

    #[test]
    fn kde_single_point_and_mass() {
        let grid = density_grid(&[100.0], 0.527, 2001);
        let dens = kde(&[100.0], 0.527, &grid).unwrap();
        let peak = dens
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((grid[peak] - 100.0).abs() < 1e-9);
        let vals = [1.0, 2.5, 2.7, 9.0, 4.4];
        let grid = density_grid(&vals, 0.527, DENSITY_POINTS);
        let dens = kde(&vals, 0.527, &grid).unwrap();
        let h = grid[1] - grid[0];
        let mass: f64 = dens.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        assert!(kde(&vals, 0.0, &grid).is_err());
    }

    #[test]
    fn kde_symmetric_sample() {
        let vals = [-2.0, -0.5, 0.5, 2.0];
        let grid: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let dens = kde(&vals, 0.8, &grid).unwrap();
        for i in 0..grid.len() {
            assert!((dens[i] - dens[grid.len() - 1 - i]).abs() < 1e-14);
        }
    }

    #[test]
    fn smoothed_quantiles_invert_mixture_cdf() {
        let vals = [97.0, 99.5, 100.0, 104.0];
        let qf = smoothed_quantile_fn(&vals, 0.527, 200).unwrap();
        for (t, x) in probability_grid(200).iter().zip(&qf) {
            let (c, _) = mixture_cdf(&vals, 0.527, *x);
            assert!((c - t).abs() < 1e-9);
        }
        assert!(qf.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn separated_pairs_recovered() {
        let pts = [0.0, 0.1, 10.0, 10.2];
        let d: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| pts.iter().map(|b| f64::abs(a - b)).collect())
            .collect();
        let dend = ward_cluster(&d).unwrap();
        assert_eq!(dend.merges.len(), 3);
        assert_eq!(dend.cut(2).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(dend.cut(4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(dend.cut(1).unwrap(), vec![0; 4]);
        assert!(dend.cut(0).is_err());
        assert!(dend.cut(5).is_err());
        assert!(dend.heights().windows(2).all(|w| w[1] >= w[0]));
        // Ward.D2 height of two singletons is their distance
        assert!((dend.merges[0].height - 0.1).abs() < 1e-12);
        let mut order = dend.leaf_order.clone();
        order.sort();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let d = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        assert!(ward_cluster(&d).is_err());
        let d = vec![vec![0.0, -1.0], vec![-1.0, 0.0]];
        assert!(ward_cluster(&d).is_err());
    }

    #[test]
    fn identical_members_barycenter() {
        let a = ProvinceDistribution::new("a", vec![1.0, 2.0, 3.0, 9.0], 100).unwrap();
        let b = ProvinceDistribution { province_id: "b".into(), ..a.clone() };
        let s = cluster_summary(&[0, 0], &[a.clone(), b]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].barycenter, a.quantile_fn);
        assert!((s[0].mean - 3.75).abs() < 1e-12);
        assert_eq!(s[0].members, vec!["a", "b"]);
        assert_eq!(s[0].q2, 2.5);
    }
}
