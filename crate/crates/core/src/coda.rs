//! Aitchison geometry on the simplex, compositional PCA and permutational ANOVA.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{closure_in_place, column_deltas, replace_zeros_with, Dataset, BUILDING_CLASSES};
use crate::rng;

pub const TERNARY_CLASSES: [&str; 3] = ["<1919", "1919-1980", ">1980"];

/// Which part labels a composition carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LabelSet {
    Unlabeled,
    /// The nine time-of-construction classes.
    Building,
    /// The three macro intervals.
    Ternary,
}

impl LabelSet {
    pub fn names(self) -> Option<&'static [&'static str]> {
        match self {
            LabelSet::Unlabeled => None,
            LabelSet::Building => Some(&BUILDING_CLASSES),
            LabelSet::Ternary => Some(&TERNARY_CLASSES),
        }
    }
}

/// Strictly positive vector closed to sum one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Composition {
    parts: Vec<f64>,
    labels: LabelSet,
}

impl Composition {
    /// Closes `parts`, which must all be finite and strictly positive.
    pub fn new(parts: Vec<f64>, labels: LabelSet) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::domain("empty composition"));
        }
        if let Some(names) = labels.names() {
            if names.len() != parts.len() {
                return Err(Error::invalid(format!(
                    "label set has {} parts, composition has {}",
                    names.len(),
                    parts.len()
                )));
            }
        }
        if let Some(bad) = parts.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::domain(format!("composition part must be positive, got {bad}")));
        }
        let mut parts = parts;
        closure_in_place(&mut parts);
        Ok(Composition { parts, labels })
    }

    pub fn unlabeled(parts: Vec<f64>) -> Result<Self> {
        Self::new(parts, LabelSet::Unlabeled)
    }

    pub(crate) fn from_closed(parts: Vec<f64>, labels: LabelSet) -> Result<Self> {
        Self::new(parts, labels)
    }

    /// Neutral element of perturbation.
    pub fn uniform(p: usize, labels: LabelSet) -> Self {
        Composition {
            parts: vec![1.0 / p as f64; p],
            labels,
        }
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn labels(&self) -> LabelSet {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

/// Image of a composition under clr; coordinates sum to zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClrVector {
    pub coords: Vec<f64>,
}

fn same_len(x: &Composition, y: &Composition) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

pub fn perturb(x: &Composition, y: &Composition) -> Result<Composition> {
    same_len(x, y)?;
    let prod = x.parts.iter().zip(&y.parts).map(|(a, b)| a * b).collect();
    Composition::new(prod, x.labels)
}

pub fn power(alpha: f64, x: &Composition) -> Result<Composition> {
    Composition::new(x.parts.iter().map(|v| v.powf(alpha)).collect(), x.labels)
}

/// Aitchison inner product as the double sum of log-ratio products over `2p`.
pub fn ait_inner(x: &Composition, y: &Composition) -> Result<f64> {
    same_len(x, y)?;
    let p = x.len();
    let mut s = 0.0;
    for j in 0..p {
        for k in 0..p {
            s += (x.parts[j] / x.parts[k]).ln() * (y.parts[j] / y.parts[k]).ln();
        }
    }
    Ok(s / (2.0 * p as f64))
}

pub fn ait_distance(x: &Composition, y: &Composition) -> Result<f64> {
    same_len(x, y)?;
    let (a, b) = (clr(x), clr(y));
    Ok(a.coords
        .iter()
        .zip(&b.coords)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt())
}

pub fn clr(x: &Composition) -> ClrVector {
    let logs: Vec<f64> = x.parts.iter().map(|v| v.ln()).collect();
    let g = logs.iter().sum::<f64>() / logs.len() as f64;
    ClrVector {
        coords: logs.into_iter().map(|l| l - g).collect(),
    }
}

pub fn clr_inv(v: &ClrVector, labels: LabelSet) -> Result<Composition> {
    let n = v.coords.len() as f64;
    let s: f64 = v.coords.iter().sum();
    if v.coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("non-finite clr coordinate"));
    }
    if s.abs() > 1e-8 {
        return Err(Error::domain(format!("clr coordinates must sum to zero, got {s}")));
    }
    let shift = s / n;
    let max = v.coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let parts = v.coords.iter().map(|c| (c - shift - max).exp()).collect();
    Composition::new(parts, labels)
}

/// Aitchison mean: clr-inverse of the arithmetic mean of clr images.
pub fn coda_mean(xs: &[Composition]) -> Result<Composition> {
    let first = xs.first().ok_or_else(|| Error::invalid("mean of an empty list"))?;
    let p = first.len();
    let mut acc = vec![0.0; p];
    for x in xs {
        same_len(first, x)?;
        for (a, c) in acc.iter_mut().zip(clr(x).coords) {
            *a += c;
        }
    }
    let n = xs.len() as f64;
    let mean = ClrVector {
        coords: acc.into_iter().map(|a| a / n).collect(),
    };
    clr_inv(&mean, first.labels)
}

/// Aggregates the nine construction classes into `<1919`, `1919-1980`, `>1980`.
pub fn aggregate_ternary_shares(parts: &[f64; 9]) -> [f64; 3] {
    [
        parts[0],
        parts[1..5].iter().sum(),
        parts[5..9].iter().sum(),
    ]
}

pub fn aggregate_ternary(x: &Composition) -> Result<Composition> {
    if x.labels != LabelSet::Building {
        return Err(Error::invalid(
            "ternary aggregation needs a composition labelled with the nine construction classes",
        ));
    }
    let parts: [f64; 9] = x.parts.as_slice().try_into().expect("nine parts");
    Composition::new(aggregate_ternary_shares(&parts).to_vec(), LabelSet::Ternary)
}

/// Ternary compositions for every record: the closed nine-class shares are amalgamated,
/// then zero parts are replaced with the dataset's delta factor times the ternary
/// column minimum.
pub fn ternary_compositions(ds: &Dataset) -> Result<Vec<Composition>> {
    let ternary: Vec<[f64; 3]> = ds
        .records()
        .iter()
        .map(|r| aggregate_ternary_shares(&r.closed_shares()))
        .collect();
    let deltas = column_deltas(&ternary, ds.delta_factor());
    ternary
        .iter()
        .map(|t| Composition::new(replace_zeros_with(t, &deltas)?, LabelSet::Ternary))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaScaling {
    #[default]
    Covariance,
    /// clr coordinates standardised to unit variance before the decomposition.
    Correlation,
}

#[derive(Debug, Clone, Serialize)]
pub struct CodaPcaResult {
    pub center: Composition,
    /// One clr-space direction per component, each of length p.
    pub loadings: Vec<Vec<f64>>,
    /// `scores[i][k]` is unit i's score on component k.
    pub scores: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
    pub sdev: Vec<f64>,
    pub scaling: PcaScaling,
    /// All variances vanish (identical compositions).
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl CodaPcaResult {
    pub fn pc1_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.first().copied().unwrap_or(0.0)).collect()
    }
}

/// PCA of the clr images on their sample (n - 1) covariance, or correlation.
///
/// At most `p - 1` components are returned, the direction of the ones vector carrying
/// no variance. Component 1 is oriented to load positively on the first part (oldest
/// construction class); later components so that their largest entry is positive.
pub fn coda_pca(xs: &[Composition], scaling: PcaScaling) -> Result<CodaPcaResult> {
    let first = xs.first().ok_or_else(|| Error::invalid("PCA of an empty list"))?;
    let p = first.len();
    let n = xs.len();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two observations"));
    }
    let mut warnings = Vec::new();
    let mut data = DMatrix::<f64>::zeros(n, p);
    for (i, x) in xs.iter().enumerate() {
        same_len(first, x)?;
        for (j, c) in clr(x).coords.into_iter().enumerate() {
            data[(i, j)] = c;
        }
    }
    let center = coda_mean(xs)?;
    for j in 0..p {
        let m = data.column(j).mean();
        data.column_mut(j).add_scalar_mut(-m);
    }
    let mut scale = vec![1.0; p];
    if scaling == PcaScaling::Correlation {
        for (j, s) in scale.iter_mut().enumerate() {
            let v = data.column(j).norm_squared() / (n - 1) as f64;
            if v <= 0.0 {
                return Err(Error::Degenerate(format!("clr coordinate {j} has zero variance")));
            }
            *s = v.sqrt();
            data.column_mut(j).scale_mut(1.0 / *s);
        }
    }
    let cov = data.transpose() * &data / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));

    let mut k = p - 1;
    if n < p {
        warnings.push(format!(
            "only {n} observations for {p} parts: components truncated to {}",
            n - 1
        ));
        k = n - 1;
    }
    let total: f64 = order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0)).sum();
    let degenerate = total <= 1e-24;
    if degenerate {
        warnings.push("all compositions coincide: no variance to decompose".into());
    }
    let mut loadings = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut sdev = Vec::with_capacity(k);
    for (rank, &c) in order[..k].iter().enumerate() {
        let lambda = eig.eigenvalues[c].max(0.0);
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().cloned().collect();
        // project out the ones direction, which carries no clr variance
        let m = v.iter().sum::<f64>() / p as f64;
        v.iter_mut().for_each(|x| *x -= m);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        let flip = if rank == 0 && v[0] != 0.0 {
            v[0] < 0.0
        } else {
            let big = v
                .iter()
                .cloned()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            big < 0.0
        };
        if flip {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        loadings.push(v);
        explained.push(if degenerate { 0.0 } else { lambda / total });
        sdev.push(lambda.sqrt());
    }
    let scores = (0..n)
        .map(|i| {
            loadings
                .iter()
                .map(|l| l.iter().enumerate().map(|(j, w)| data[(i, j)] * w).sum())
                .collect()
        })
        .collect();
    Ok(CodaPcaResult {
        center,
        loadings,
        scores,
        explained,
        sdev,
        scaling,
        degenerate,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PermanovaResult {
    /// Observed pseudo-F; `+inf` (serialised as null) when the within sum of squares vanishes.
    pub f0: f64,
    pub p_value: f64,
    pub ss_t: f64,
    pub ss_w: f64,
    pub group_sizes: Vec<usize>,
    pub df_between: usize,
    pub df_within: usize,
    pub permutations: usize,
    pub seed: u64,
    pub note: Option<String>,
}

// Same comparison slack as vegan's permutest.
const F_EPS: f64 = 1.490_116_119_384_765_6e-8;

/// One-way PERMANOVA on Euclidean distances between clr images.
///
/// `groups[i]` is the group index (0-based) of observation i; every index below the
/// maximum must be used. The null distribution shuffles the label vector, preserving
/// group sizes, with replicate r drawing from its own seed-derived stream.
pub fn permanova(
    xs: &[Composition],
    groups: &[usize],
    m_permutations: usize,
    seed: u64,
) -> Result<PermanovaResult> {
    let coords: Vec<Vec<f64>> = xs.iter().map(|x| clr(x).coords).collect();
    permanova_euclidean(&coords, groups, m_permutations, seed)
}

/// PERMANOVA on arbitrary Euclidean coordinates.
pub fn permanova_euclidean(
    coords: &[Vec<f64>],
    groups: &[usize],
    m_permutations: usize,
    seed: u64,
) -> Result<PermanovaResult> {
    let n = coords.len();
    if groups.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: groups.len(),
        });
    }
    if m_permutations == 0 {
        return Err(Error::invalid("at least one permutation is required"));
    }
    let g = groups.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; g];
    for &s in groups {
        sizes[s] += 1;
    }
    if g < 2 {
        return Err(Error::invalid("PERMANOVA needs at least two groups"));
    }
    if let Some(s) = sizes.iter().position(|c| *c == 0) {
        return Err(Error::invalid(format!("group {s} has no members")));
    }
    if n <= g {
        return Err(Error::invalid("PERMANOVA needs more observations than groups"));
    }
    let p = coords[0].len();
    let mut centered = vec![0.0; n * p];
    let mut mean = vec![0.0; p];
    for c in coords {
        if c.len() != p {
            return Err(Error::LengthMismatch { expected: p, got: c.len() });
        }
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for (i, c) in coords.iter().enumerate() {
        for j in 0..p {
            centered[i * p + j] = c[j] - mean[j];
        }
    }
    let ss_t: f64 = centered.iter().map(|v| v * v).sum();

    let between = |labels: &[usize]| -> f64 {
        let mut sums = vec![0.0; g * p];
        for (i, &s) in labels.iter().enumerate() {
            let row = &centered[i * p..(i + 1) * p];
            for (acc, v) in sums[s * p..(s + 1) * p].iter_mut().zip(row) {
                *acc += v;
            }
        }
        (0..g)
            .map(|s| sums[s * p..(s + 1) * p].iter().map(|v| v * v).sum::<f64>() / sizes[s] as f64)
            .sum()
    };
    let df_b = g - 1;
    let df_w = n - g;
    let pseudo_f = |ss_a: f64| -> f64 {
        let ss_w = (ss_t - ss_a).max(0.0);
        if ss_w <= ss_t * 1e-14 {
            f64::INFINITY
        } else {
            (ss_a / df_b as f64) / (ss_w / df_w as f64)
        }
    };
    let ss_a0 = between(groups);
    let ss_w = (ss_t - ss_a0).max(0.0);
    let f0 = pseudo_f(ss_a0);
    let note = if f0.is_infinite() {
        Some("within-group sum of squares is zero: pseudo-F is +inf".to_string())
    } else {
        None
    };
    let exceed: usize = (0..m_permutations)
        .into_par_iter()
        .map_init(
            || groups.to_vec(),
            |labels, r| {
                labels.copy_from_slice(groups);
                let mut rng = rng::indexed_stream(seed, "permanova", r as u64);
                labels.shuffle(&mut rng);
                let f = pseudo_f(between(labels));
                usize::from(f >= f0 - F_EPS || (f0.is_infinite() && f.is_infinite()))
            },
        )
        .sum();
    Ok(PermanovaResult {
        f0,
        p_value: (exceed + 1) as f64 / (m_permutations + 1) as f64,
        ss_t,
        ss_w,
        group_sizes: sizes,
        df_between: df_b,
        df_within: df_w,
        permutations: m_permutations,
        seed,
        note,
    })
}
