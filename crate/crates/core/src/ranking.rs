//! Hazard classes, quartile-threshold selection, per-indicator rankings and
//! Copeland aggregation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::stats::{five_number, quantile, FiveNumber, QuantileType};

/// Peak-ground-acceleration classes; intervals are left-open, right-closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum HazardClass {
    Low,
    Moderate,
    Medium,
    High,
}

impl HazardClass {
    pub const ALL: [HazardClass; 4] = [
        HazardClass::Low,
        HazardClass::Moderate,
        HazardClass::Medium,
        HazardClass::High,
    ];

    pub fn from_ag_max(ag_max: f64) -> Result<HazardClass> {
        if !(ag_max > 0.0) || !ag_max.is_finite() {
            return Err(Error::domain(format!("ag_max must be positive, got {ag_max}")));
        }
        Ok(if ag_max <= 0.05 {
            HazardClass::Low
        } else if ag_max <= 0.15 {
            HazardClass::Moderate
        } else if ag_max <= 0.25 {
            HazardClass::Medium
        } else {
            HazardClass::High
        })
    }

    /// `(lower, upper]` bounds in units of g.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            HazardClass::Low => (0.0, 0.05),
            HazardClass::Moderate => (0.05, 0.15),
            HazardClass::Medium => (0.15, 0.25),
            HazardClass::High => (0.25, f64::INFINITY),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn macro_class(self) -> HazardMacro {
        match self {
            HazardClass::Medium | HazardClass::High => HazardMacro::Severe,
            HazardClass::Low | HazardClass::Moderate => HazardMacro::Mild,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HazardClass::Low => "(0,0.05]",
            HazardClass::Moderate => "(0.05,0.15]",
            HazardClass::Medium => "(0.15,0.25]",
            HazardClass::High => "(0.25,inf)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum HazardMacro {
    /// Medium or high hazard, `ag_max > 0.15`.
    Severe,
    Mild,
}

impl HazardMacro {
    pub fn from_ag_max(ag_max: f64) -> HazardMacro {
        if ag_max > 0.15 {
            HazardMacro::Severe
        } else {
            HazardMacro::Mild
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HazardMacro::Severe => "severe",
            HazardMacro::Mild => "mild",
        }
    }
}

pub fn hazard_classes(ds: &Dataset) -> Result<Vec<HazardClass>> {
    ds.records()
        .iter()
        .map(|r| {
            HazardClass::from_ag_max(r.ag_max)
                .map_err(|e| Error::domain(format!("unit {}: {e}", r.unit_id)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectionThresholds {
    /// Third quartile of IVSM.
    pub t_ivsm: f64,
    /// First quartile of VAR_PERC.
    pub t_g: f64,
    /// Third quartile of the building-stock PC1 score.
    pub t_b: f64,
    pub quantile_type: u8,
}

fn check_joined(ds: &Dataset, pc1: &[f64]) -> Result<()> {
    if pc1.len() != ds.len() {
        return Err(Error::LengthMismatch {
            expected: ds.len(),
            got: pc1.len(),
        });
    }
    Ok(())
}

pub fn compute_thresholds(
    ds: &Dataset,
    pc1_scores: &[f64],
    qtype: QuantileType,
) -> Result<SelectionThresholds> {
    check_joined(ds, pc1_scores)?;
    if ds.is_empty() {
        return Err(Error::invalid("thresholds of an empty dataset"));
    }
    Ok(SelectionThresholds {
        t_ivsm: quantile(&ds.column(|r| r.ivsm), 0.75, qtype),
        t_g: quantile(&ds.column(|r| r.var_perc), 0.25, qtype),
        t_b: quantile(pc1_scores, 0.75, qtype),
        quantile_type: qtype.number(),
    })
}

/// Units passing all three inclusive threshold inequalities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub unit_ids: Vec<String>,
    pub indices: Vec<usize>,
    pub n_total: usize,
    /// `n (1/4)^3`: expected count if the three indicators were independent.
    pub expected_independent: f64,
    /// Binomial standard deviation of that count.
    pub sd_independent: f64,
    pub class_counts: [usize; 4],
    pub class_shares: [f64; 4],
}

pub fn passes(ivsm: f64, var_perc: f64, pc1: f64, th: &SelectionThresholds) -> bool {
    ivsm >= th.t_ivsm && var_perc <= th.t_g && pc1 >= th.t_b
}

pub fn select(ds: &Dataset, pc1_scores: &[f64], th: &SelectionThresholds) -> Result<Selection> {
    check_joined(ds, pc1_scores)?;
    let indices: Vec<usize> = ds
        .records()
        .iter()
        .zip(pc1_scores)
        .enumerate()
        .filter(|(_, (r, pc1))| passes(r.ivsm, r.var_perc, **pc1, th))
        .map(|(i, _)| i)
        .collect();
    let mut class_counts = [0usize; 4];
    for &i in &indices {
        let r = &ds.records()[i];
        let c = HazardClass::from_ag_max(r.ag_max)
            .map_err(|e| Error::domain(format!("unit {}: {e}", r.unit_id)))?;
        class_counts[c.index()] += 1;
    }
    let k = indices.len().max(1) as f64;
    let n = ds.len() as f64;
    let p = 1.0 / 64.0;
    Ok(Selection {
        unit_ids: indices.iter().map(|&i| ds.records()[i].unit_id.clone()).collect(),
        n_total: ds.len(),
        expected_independent: n * p,
        sd_independent: (n * p * (1.0 - p)).sqrt(),
        class_shares: class_counts.map(|c| c as f64 / k),
        class_counts,
        indices,
    })
}

/// Rank numbers 1..n. The primary key is `values` (ascending unless `descending`);
/// ties go to population, the smaller population receiving the larger rank number,
/// and then to ascending unit id.
pub fn rank_by(values: &[f64], pops: &[u64], ids: &[String], descending: bool) -> Vec<u32> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let primary = if descending {
            values[b].total_cmp(&values[a])
        } else {
            values[a].total_cmp(&values[b])
        };
        primary.then(pops[b].cmp(&pops[a])).then(ids[a].cmp(&ids[b]))
    });
    let mut ranks = vec![0u32; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos as u32 + 1;
    }
    ranks
}

/// Rank vectors in dataset order; larger rank numbers mean more vulnerable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndicatorRankings {
    pub ivsm: Vec<u32>,
    pub var_perc: Vec<u32>,
    pub pc1: Vec<u32>,
}

pub fn indicator_rankings(ds: &Dataset, pc1_scores: &[f64]) -> Result<IndicatorRankings> {
    check_joined(ds, pc1_scores)?;
    let pops: Vec<u64> = ds.records().iter().map(|r| r.pop).collect();
    let ids = ds.unit_ids();
    Ok(IndicatorRankings {
        ivsm: rank_by(&ds.column(|r| r.ivsm), &pops, &ids, false),
        var_perc: rank_by(&ds.column(|r| r.var_perc), &pops, &ids, true),
        pc1: rank_by(pc1_scores, &pops, &ids, false),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CopelandResult {
    pub unit_id: String,
    pub r1: u32,
    pub r2: u32,
    pub r3: u32,
    pub copeland: i64,
}

fn check_permutations(ranks: [&[u32]; 3]) -> Result<usize> {
    let n = ranks[0].len();
    for r in ranks {
        if r.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: r.len(),
            });
        }
        let mut seen = vec![false; n];
        for &v in r {
            let v = v as usize;
            if v == 0 || v > n || seen[v - 1] {
                return Err(Error::invalid("rank vector is not a permutation of 1..n"));
            }
            seen[v - 1] = true;
        }
    }
    Ok(n)
}

/// Copeland scores by explicit pairwise competitions. O(n^2).
pub fn copeland_pairwise(r1: &[u32], r2: &[u32], r3: &[u32]) -> Result<Vec<i64>> {
    let n = check_permutations([r1, r2, r3])?;
    let mut c = vec![0i64; n];
    for i in 0..n {
        for k in i + 1..n {
            let wins =
                u8::from(r1[i] > r1[k]) + u8::from(r2[i] > r2[k]) + u8::from(r3[i] > r3[k]);
            let s = if wins >= 2 { 1 } else { -1 };
            c[i] += s;
            c[k] -= s;
        }
    }
    Ok(c)
}

struct Fenwick(Vec<i64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, pos: usize, v: i64) {
        let mut i = pos;
        while i < self.0.len() {
            self.0[i] += v;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum over positions 1..=pos.
    fn prefix(&self, pos: usize) -> i64 {
        let mut i = pos;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// `out[i] += #{k : a[k] < a[i] and b[k] < b[i]}` for permutations a, b.
fn dominance_2d(a: &[u32], b: &[u32], out: &mut [i64]) {
    let n = a.len();
    let mut by_a = vec![0usize; n];
    for (i, &r) in a.iter().enumerate() {
        by_a[r as usize - 1] = i;
    }
    let mut bit = Fenwick::new(n);
    for &i in &by_a {
        out[i] += bit.prefix(b[i] as usize - 1);
        bit.add(b[i] as usize, 1);
    }
}

fn dominance_split(items: &mut [usize], r2: &[u32], r3: &[u32], bit: &mut Fenwick, out: &mut [i64]) {
    let len = items.len();
    if len < 2 {
        return;
    }
    let mid = len / 2;
    dominance_split(&mut items[..mid], r2, r3, bit, out);
    dominance_split(&mut items[mid..], r2, r3, bit, out);
    // both halves come back sorted by r2; each left item precedes each right one in r1
    let (left, right) = items.split_at(mid);
    let mut li = 0;
    for &j in right {
        while li < left.len() && r2[left[li]] < r2[j] {
            bit.add(r3[left[li]] as usize, 1);
            li += 1;
        }
        out[j] += bit.prefix(r3[j] as usize - 1);
    }
    for &i in &left[..li] {
        bit.add(r3[i] as usize, -1);
    }
    items.sort_by_key(|&i| r2[i]);
}

/// `out[i] = #{k : k strictly below i in all three permutations}`.
fn dominance_3d(r1: &[u32], r2: &[u32], r3: &[u32]) -> Vec<i64> {
    let n = r1.len();
    let mut order = vec![0usize; n];
    for (i, &r) in r1.iter().enumerate() {
        order[r as usize - 1] = i;
    }
    let mut out = vec![0i64; n];
    let mut bit = Fenwick::new(n);
    dominance_split(&mut order, r2, r3, &mut bit, &mut out);
    out
}

/// Copeland scores via dominance counting, O(n log^2 n).
///
/// With `b_l = [r_il > r_kl]`, a majority of three is `b1 b2 + b1 b3 + b2 b3 - 2 b1 b2 b3`,
/// so the wins of unit i are its three two-ranking dominance counts minus twice its
/// three-ranking dominance count.
pub fn copeland_fast(r1: &[u32], r2: &[u32], r3: &[u32]) -> Result<Vec<i64>> {
    let n = check_permutations([r1, r2, r3])?;
    let mut pairs = vec![0i64; n];
    dominance_2d(r1, r2, &mut pairs);
    dominance_2d(r1, r3, &mut pairs);
    dominance_2d(r2, r3, &mut pairs);
    let all = dominance_3d(r1, r2, r3);
    let others = n as i64 - 1;
    Ok(pairs
        .iter()
        .zip(&all)
        .map(|(p, a)| 2 * (p - 2 * a) - others)
        .collect())
}

/// Copeland competition over three rankings; larger scores mean more vulnerable.
pub fn copeland(ids: &[String], ranks: &IndicatorRankings) -> Result<Vec<CopelandResult>> {
    let scores = copeland_fast(&ranks.ivsm, &ranks.var_perc, &ranks.pc1)?;
    if ids.len() != scores.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            got: ids.len(),
        });
    }
    Ok((0..ids.len())
        .map(|i| CopelandResult {
            unit_id: ids[i].clone(),
            r1: ranks.ivsm[i],
            r2: ranks.var_perc[i],
            r3: ranks.pc1[i],
            copeland: scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub class: HazardClass,
    pub label: &'static str,
    pub n: usize,
    pub summary: Option<FiveNumber>,
    pub scores: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dominance {
    pub lower: HazardClass,
    pub higher: HazardClass,
    /// `P(X_higher > X_lower) + P(X_higher = X_lower) / 2`.
    pub prob_higher_exceeds: f64,
    pub dominates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HazardScoreReport {
    pub classes: Vec<ClassScores>,
    pub dominance: Vec<Dominance>,
    /// Medians strictly increase over the non-empty classes.
    pub medians_increasing: bool,
}

fn exceed_probability(lower: &[i64], higher: &[i64]) -> f64 {
    let mut lo = lower.to_vec();
    lo.sort_unstable();
    let mut acc = 0.0;
    for &x in higher {
        let below = lo.partition_point(|v| *v < x);
        let upto = lo.partition_point(|v| *v <= x);
        acc += below as f64 + 0.5 * (upto - below) as f64;
    }
    acc / (lower.len() as f64 * higher.len() as f64)
}

/// Copeland score distributions conditional on hazard class.
pub fn score_by_hazard(
    results: &[CopelandResult],
    classes: &[HazardClass],
) -> Result<HazardScoreReport> {
    if results.len() != classes.len() {
        return Err(Error::LengthMismatch {
            expected: results.len(),
            got: classes.len(),
        });
    }
    let mut per: Vec<Vec<i64>> = vec![Vec::new(); 4];
    for (r, c) in results.iter().zip(classes) {
        per[c.index()].push(r.copeland);
    }
    let class_scores: Vec<ClassScores> = HazardClass::ALL
        .iter()
        .zip(per)
        .map(|(c, scores)| ClassScores {
            class: *c,
            label: c.label(),
            n: scores.len(),
            summary: if scores.is_empty() {
                None
            } else {
                Some(five_number(
                    &scores.iter().map(|s| *s as f64).collect::<Vec<_>>(),
                ))
            },
            scores,
        })
        .collect();
    let present: Vec<&ClassScores> = class_scores.iter().filter(|c| c.n > 0).collect();
    let mut dominance = Vec::new();
    for a in 0..present.len() {
        for b in a + 1..present.len() {
            let p = exceed_probability(&present[a].scores, &present[b].scores);
            dominance.push(Dominance {
                lower: present[a].class,
                higher: present[b].class,
                prob_higher_exceeds: p,
                dominates: p > 0.5,
            });
        }
    }
    let medians: Vec<f64> = present
        .iter()
        .filter_map(|c| c.summary.map(|s| s.median))
        .collect();
    let medians_increasing = medians.windows(2).all(|w| w[1] > w[0]);
    Ok(HazardScoreReport {
        classes: class_scores,
        dominance,
        medians_increasing,
    })
}
