//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Replication checks need the public municipality dataset; point
//! `GEOVULN_REPLICATION` at a run configuration for it. Without it those lines are
//! reported as FAIL (not available) and do not affect the exit status. The
//! property fallbacks and the determinism check always run and are enforced.

mod common;

use std::path::Path;
use std::process::ExitCode;

use geovuln_core::autocorr::{lisa, morans_i, LisaConfig};
use geovuln_core::coda::{ait_distance, clr, coda_pca, perturb, permanova_euclidean, Composition, PcaScaling};
use geovuln_core::distributional::{empirical_quantile_fn, wasserstein_quantiles, ward_cluster};
use geovuln_core::fda::{fpca, log_growth, smooth_all, trapezoid_weights, BSplineSmoother};
use geovuln_core::ranking::{compute_thresholds, copeland_fast, rank_by, select};
use geovuln_core::rng;
use geovuln_core::spatial::SpatialWeights;
use geovuln_core::stats::QuantileType;
use geovuln_core::synth::{generate, SynthConfig};
use rand::Rng;
use serde_json::Value;

use common::{artifacts, fixture, geovuln, json, Artifacts};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

#[derive(Default)]
struct Report {
    enforced_failures: usize,
    passed: usize,
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, title: &str, enforced: bool, r: Check) {
        match r {
            Ok(detail) => {
                self.passed += 1;
                println!("PASS [{id}] {title}: {detail}");
            }
            Err(detail) => {
                self.failed += 1;
                if enforced {
                    self.enforced_failures += 1;
                }
                println!("FAIL [{id}] {title}: {detail}");
            }
        }
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i:03}")).collect()
}

// ---------------------------------------------------------------- fallbacks

fn moran_fallback() -> Check {
    let (mut worst_mean, mut worst_sum, mut graphs) = (0.0f64, 0.0f64, 0);
    let mut g = 0u64;
    while graphs < 50 {
        g += 1;
        let mut r = rng::indexed_stream(101, "accept-graph", g);
        let n = 20;
        let names = ids(n);
        let mut adj = vec![vec![false; n]; n];
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if r.random::<f64>() < 0.2 {
                    adj[a][b] = true;
                    adj[b][a] = true;
                    pairs.push((names[a].clone(), names[b].clone()));
                }
            }
        }
        let conn: Vec<usize> = (0..n).filter(|i| adj[*i].iter().any(|b| *b)).collect();
        if conn.len() < 3 {
            continue;
        }
        graphs += 1;
        let w = SpatialWeights::from_pairs(&names, &pairs).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let cn = conn.len() as f64;
        let mean = conn.iter().map(|i| x[*i]).sum::<f64>() / cn;
        let mut num = 0.0;
        let mut s0 = 0.0;
        for &i in &conn {
            let deg = adj[i].iter().filter(|b| **b).count() as f64;
            for &j in &conn {
                if adj[i][j] {
                    num += (x[i] - mean) * (x[j] - mean) / deg;
                    s0 += 1.0 / deg;
                }
            }
        }
        let den: f64 = conn.iter().map(|i| (x[*i] - mean).powi(2)).sum();
        let oracle = cn / s0 * num / den;
        let i = morans_i(&w, &x).map_err(|e| e.to_string())?;
        let res = lisa(&w, &x, LisaConfig { permutations: 99, ..Default::default() }).map_err(|e| e.to_string())?;
        let mean_local = res.iter().filter_map(|r| r.local_i).sum::<f64>() / cn;
        worst_sum = worst_sum.max((i - oracle).abs());
        worst_mean = worst_mean.max((mean_local - i).abs());
    }
    ensure(worst_mean <= 1e-10 && worst_sum <= 1e-10, || {
        format!("max |mean I_i - I| = {worst_mean:.2e}, max |I - double sum| = {worst_sum:.2e}")
    })?;
    Ok(format!(
        "{graphs} random 20-node graphs, max |mean I_i - I| = {worst_mean:.1e}, max |I - double sum| = {worst_sum:.1e}"
    ))
}

fn permanova_fallback() -> Check {
    // centroid sums of squares against the pairwise form
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut r = rng::indexed_stream(102, "accept-ss", inst);
        let n = r.random_range(12..40);
        let d = r.random_range(1..5);
        let k = r.random_range(2..5);
        let coords: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let mut groups: Vec<usize> = (0..n).map(|i| i % k).collect();
        for i in (1..n).rev() {
            groups.swap(i, r.random_range(0..=i));
        }
        let res = permanova_euclidean(&coords, &groups, 9, inst).map_err(|e| e.to_string())?;
        let d2 = |i: usize, j: usize| -> f64 { coords[i].iter().zip(&coords[j]).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut sizes = vec![0usize; k];
        for g in &groups {
            sizes[*g] += 1;
        }
        let (mut sst, mut ssw) = (0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                sst += d2(i, j);
                if groups[i] == groups[j] {
                    ssw += d2(i, j) / sizes[groups[i]] as f64;
                }
            }
        }
        sst /= n as f64;
        worst = worst.max((res.ss_t - sst).abs()).max((res.ss_w - ssw).abs());
    }
    ensure(worst <= 1e-8, || format!("sum-of-squares identity off by {worst:.2e}"))?;

    // null calibration: exchangeable groups
    let reps = 2000;
    let m = 199;
    let mut ps: Vec<f64> = (0..reps as u64)
        .map(|r| {
            let mut g = rng::indexed_stream(103, "accept-null", r);
            let coords: Vec<Vec<f64>> = (0..20).map(|_| (0..2).map(|_| g.random_range(-1.0..1.0)).collect()).collect();
            let groups: Vec<usize> = (0..20).map(|i| i % 2).collect();
            permanova_euclidean(&coords, &groups, m, r).map(|res| res.p_value)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ps.sort_by(f64::total_cmp);
    let nf = reps as f64;
    let (mut d_plus, mut d_minus) = (0.0f64, 0.0f64);
    for (i, p) in ps.iter().enumerate() {
        d_plus = d_plus.max((i + 1) as f64 / nf - p);
        d_minus = d_minus.max(p - i as f64 / nf);
    }
    let ks = d_plus.max(d_minus);
    ensure(ks < 0.05, || format!("null p-values: KS = {ks:.4} (D+ = {d_plus:.4})"))?;
    Ok(format!(
        "SS identity max error {worst:.1e} on 20 instances; null KS = {ks:.4}, D+ = {d_plus:.4} over {reps} replicates (M = {m})"
    ))
}

fn random_comp(r: &mut impl Rng, p: usize) -> Composition {
    Composition::unlabeled((0..p).map(|_| r.random_range(0.01..10.0)).collect()).expect("positive parts")
}

fn coda_fallback() -> Check {
    let mut r = rng::indexed_stream(104, "accept-clr", 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = random_comp(&mut r, 9);
        let y = random_comp(&mut r, 9);
        // Aitchison distance from all pairwise log-ratios
        let (xp, yp) = (x.parts(), y.parts());
        let mut s = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                s += ((xp[i] / xp[j]).ln() - (yp[i] / yp[j]).ln()).powi(2);
            }
        }
        let d = (s / 18.0).sqrt();
        let (cx, cy) = (clr(&x), clr(&y));
        let e = cx.coords.iter().zip(&cy.coords).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let a = ait_distance(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((d - e).abs()).max((a - e).abs());
    }
    ensure(worst <= 1e-10, || format!("clr isometry off by {worst:.2e}"))?;
    let mut worst_scores = 0.0f64;
    let mut sets = 0;
    for inst in 0..30u64 {
        let mut r = rng::indexed_stream(104, "accept-perturb", inst);
        let xs: Vec<Composition> = (0..60).map(|_| random_comp(&mut r, 9)).collect();
        let a = random_comp(&mut r, 9);
        let moved: Vec<Composition> = xs.iter().map(|x| perturb(x, &a)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let p = coda_pca(&xs, PcaScaling::Covariance).map_err(|e| e.to_string())?;
        let q = coda_pca(&moved, PcaScaling::Covariance).map_err(|e| e.to_string())?;
        // components with nearly equal variances are not identified
        if p.sdev.windows(2).take(8).any(|w| w[0] - w[1] < 1e-4 * w[0]) {
            continue;
        }
        sets += 1;
        for (sp, sq) in p.scores.iter().zip(&q.scores) {
            for (u, v) in sp.iter().zip(sq) {
                worst_scores = worst_scores.max((u - v).abs());
            }
        }
    }
    ensure(sets > 0 && worst_scores <= 1e-8, || format!("perturbation moved scores by {worst_scores:.2e} ({sets} sets)"))?;
    Ok(format!(
        "clr isometry max error {worst:.1e} on 1000 pairs; perturbation score drift {worst_scores:.1e} on {sets} data sets"
    ))
}

fn type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn selection_fallback() -> Check {
    let mut tables = 0;
    for seed in 0..40u64 {
        let rows = 5 + (seed % 7) as usize;
        let cols = 6 + (seed % 5) as usize;
        let ds = generate(&SynthConfig { rows, cols, seed, population: false, ..Default::default() })
            .map_err(|e| e.to_string())?
            .dataset;
        let comps: Vec<_> = ds.records().iter().map(|r| r.building_comp.clone()).collect();
        let pc1 = coda_pca(&comps, PcaScaling::Covariance).map_err(|e| e.to_string())?.pc1_scores();
        for qt in 1..=9u8 {
            let th = compute_thresholds(&ds, &pc1, QuantileType::new(qt).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let sel = select(&ds, &pc1, &th).map_err(|e| e.to_string())?;
            let direct: Vec<String> = ds
                .records()
                .iter()
                .zip(&pc1)
                .filter(|(r, p)| r.ivsm >= th.t_ivsm && r.var_perc <= th.t_g && **p >= th.t_b)
                .map(|(r, _)| r.unit_id.clone())
                .collect();
            ensure(sel.unit_ids == direct, || format!("seed {seed} type {qt}: selection differs from filter"))?;
            if qt == 7 {
                let mut iv = ds.column(|r| r.ivsm);
                iv.sort_by(f64::total_cmp);
                let mut vp = ds.column(|r| r.var_perc);
                vp.sort_by(f64::total_cmp);
                let mut pc = pc1.clone();
                pc.sort_by(f64::total_cmp);
                let want = [type7(&iv, 0.75), type7(&vp, 0.25), type7(&pc, 0.75)];
                let got = [th.t_ivsm, th.t_g, th.t_b];
                for (a, b) in want.iter().zip(got) {
                    ensure((a - b).abs() <= 1e-9 * a.abs().max(1.0), || format!("seed {seed}: threshold {b} vs {a}"))?;
                }
            }
            tables += 1;
        }
    }
    Ok(format!("{tables} table/quantile-type combinations match a direct filter"))
}

fn draw(r: &mut impl Rng, n: usize) -> [Vec<f64>; 3] {
    let mut col = || (0..n).map(|_| r.random_range(-50.0..50.0)).collect::<Vec<f64>>();
    [col(), col(), col()]
}

fn sample(r: &mut impl Rng) -> Vec<f64> {
    let n = r.random_range(1..60);
    let loc = r.random_range(80.0..120.0);
    (0..n).map(|_| loc + r.random_range(-5.0..5.0)).collect()
}

fn copeland_fallback() -> Check {
    let n = 50;
    let names = ids(n);
    for inst in 0..200u64 {
        let mut r = rng::indexed_stream(105, "accept-copeland", inst);
        let [iv, vp, pc] = draw(&mut r, n);
        let pops: Vec<u64> = (0..n).map(|_| r.random_range(100..10_000)).collect();
        let ranks = [rank_by(&iv, &pops, &names, false), rank_by(&vp, &pops, &names, true), rank_by(&pc, &pops, &names, false)];
        let c = copeland_fast(&ranks[0], &ranks[1], &ranks[2]).map_err(|e| e.to_string())?;
        let mut oracle = vec![0i64; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let wins = u8::from(iv[i] > iv[j]) + u8::from(vp[i] < vp[j]) + u8::from(pc[i] > pc[j]);
                oracle[i] += if wins >= 2 { 1 } else { -1 };
            }
        }
        ensure(c == oracle, || format!("instance {inst}: scores differ from the pairwise oracle"))?;
        ensure(c.iter().sum::<i64>() == 0, || format!("instance {inst}: scores do not sum to zero"))?;
    }
    for inst in 0..50u64 {
        let mut r = rng::indexed_stream(105, "accept-monotone", inst);
        let [iv, vp, pc] = draw(&mut r, n);
        let pops: Vec<u64> = (0..n).map(|_| r.random_range(100..10_000)).collect();
        let score = |a: &[f64], b: &[f64], c: &[f64]| {
            copeland_fast(&rank_by(a, &pops, &names, false), &rank_by(b, &pops, &names, true), &rank_by(c, &pops, &names, false))
        };
        let base = score(&iv, &vp, &pc).map_err(|e| e.to_string())?;
        let t1: Vec<f64> = iv.iter().map(|x| (x / 10.0).exp()).collect();
        let t2: Vec<f64> = vp.iter().map(|x| x * x * x + 3.0 * x).collect();
        let t3: Vec<f64> = pc.iter().map(|x| x.atan() * 7.0 - 2.0).collect();
        let moved = score(&t1, &t2, &t3).map_err(|e| e.to_string())?;
        ensure(base == moved, || format!("instance {inst}: monotone transform changed the ranking"))?;
    }
    Ok("200 random 50-unit instances equal the pairwise oracle with zero sum; 50 monotone-transform checks unchanged".into())
}

fn fpca_fallback() -> Check {
    let ds = generate(&SynthConfig::default()).map_err(|e| e.to_string())?.dataset;
    let (curves, _) = log_growth(&ds);
    let res = fpca(&smooth_all(&curves).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let total: f64 = res.explained.iter().sum();
    ensure((total - 1.0).abs() <= 1e-12, || format!("explained fractions sum to {total}"))?;
    let w = trapezoid_weights(&res.grid);
    let mut ortho = 0.0f64;
    for (a, ha) in res.harmonics.iter().enumerate() {
        for (b, hb) in res.harmonics.iter().enumerate() {
            let ip: f64 = ha.iter().zip(hb).zip(&w).map(|((x, y), w)| x * y * w).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            ortho = ortho.max((ip - want).abs());
        }
    }
    ensure(ortho <= 1e-8, || format!("harmonics deviate from orthonormality by {ortho:.2e}"))?;
    let smoother = BSplineSmoother::yearly();
    let mut r = rng::indexed_stream(106, "accept-cubic", 0);
    let mut cubic = 0.0f64;
    for _ in 0..50 {
        let c: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = smoother
            .grid()
            .iter()
            .map(|t| {
                let u = (t - 2002.0) / 10.0;
                c[0] + c[1] * u + c[2] * u * u + c[3] * u * u * u
            })
            .collect();
        let (fit, _) = smoother.smooth_values(&y).map_err(|e| e.to_string())?;
        for (a, b) in fit.iter().zip(&y) {
            cubic = cubic.max((a - b).abs());
        }
    }
    ensure(cubic <= 1e-8, || format!("cubic reproduction error {cubic:.2e}"))?;
    Ok(format!(
        "explained sums to 1 ({:.1e}); orthonormality error {ortho:.1e} over {} harmonics; cubic reproduction error {cubic:.1e}",
        (total - 1.0).abs(),
        res.harmonics.len()
    ))
}

fn ward_cost(pts: &[[f64; 2]], a: &[usize], b: &[usize]) -> f64 {
    let ss = |set: &[usize]| {
        let n = set.len() as f64;
        let cx = set.iter().map(|i| pts[*i][0]).sum::<f64>() / n;
        let cy = set.iter().map(|i| pts[*i][1]).sum::<f64>() / n;
        set.iter().map(|i| (pts[*i][0] - cx).powi(2) + (pts[*i][1] - cy).powi(2)).sum::<f64>()
    };
    let joined: Vec<usize> = a.iter().chain(b).copied().collect();
    ss(&joined) - ss(a) - ss(b)
}

fn euclid(pts: &[[f64; 2]]) -> Vec<Vec<f64>> {
    pts.iter()
        .map(|a| pts.iter().map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).collect())
        .collect()
}

fn clustering_fallback() -> Check {
    let mut r = rng::indexed_stream(107, "accept-wasserstein", 0);
    let k = 1000;
    let mut worst_tri = f64::NEG_INFINITY;
    for t in 0..300 {
        let (a, b, c) = (sample(&mut r), sample(&mut r), sample(&mut r));
        let (qa, qb, qc) = (empirical_quantile_fn(&a, k), empirical_quantile_fn(&b, k), empirical_quantile_fn(&c, k));
        let d = |x: &[f64], y: &[f64]| wasserstein_quantiles(x, y).map_err(|e| e.to_string());
        let (ab, ba, bc, ac, aa) = (d(&qa, &qb)?, d(&qb, &qa)?, d(&qb, &qc)?, d(&qa, &qc)?, d(&qa, &qa)?);
        ensure(aa == 0.0 && ab == ba && ab >= 0.0, || format!("triple {t}: identity or symmetry fails"))?;
        worst_tri = worst_tri.max(ac - ab - bc);
        ensure(ac <= ab + bc + 1e-9, || format!("triple {t}: triangle inequality fails by {:.2e}", ac - ab - bc))?;
    }
    let mut sets = 0;
    for inst in 0..100u64 {
        let mut r = rng::indexed_stream(107, "accept-ward", inst);
        let n = r.random_range(2..30);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]).collect();
        let dend = ward_cluster(&euclid(&pts)).map_err(|e| e.to_string())?;
        ensure(dend.heights().windows(2).all(|w| w[1] >= w[0] - 1e-12), || format!("set {inst}: heights decrease"))?;
        sets += 1;
    }
    for inst in 0..50u64 {
        let mut r = rng::indexed_stream(107, "accept-greedy", inst);
        let pts: Vec<[f64; 2]> = (0..6).map(|_| [r.random_range(0.0..10.0), r.random_range(0.0..10.0)]).collect();
        let dend = ward_cluster(&euclid(&pts)).map_err(|e| e.to_string())?;
        let mut clusters: Vec<(usize, Vec<usize>)> = (0..6).map(|i| (i, vec![i])).collect();
        for (s, m) in dend.merges.iter().enumerate() {
            let mut best = (f64::INFINITY, 0, 0);
            for x in 0..clusters.len() {
                for y in x + 1..clusters.len() {
                    let c = ward_cost(&pts, &clusters[x].1, &clusters[y].1);
                    if c < best.0 {
                        best = (c, x, y);
                    }
                }
            }
            let (cost, x, y) = best;
            let mut got = [m.a, m.b];
            got.sort();
            let mut want = [clusters[x].0, clusters[y].0];
            want.sort();
            ensure(got == want, || format!("set {inst} step {s}: merged {got:?}, greedy oracle {want:?}"))?;
            ensure((m.height - (2.0 * cost).sqrt()).abs() < 1e-10, || format!("set {inst} step {s}: height mismatch"))?;
            let merged: Vec<usize> = clusters[x].1.iter().chain(&clusters[y].1).copied().collect();
            clusters.remove(y);
            clusters.remove(x);
            clusters.push((6 + s, merged));
        }
    }
    Ok(format!(
        "metric axioms on 300 triples (worst triangle slack {worst_tri:.1e}); monotone heights on {sets} sets; 50 six-point sets follow the greedy oracle"
    ))
}

fn determinism() -> Check {
    let fx = fixture(16, 16, "");
    let cfg = fx.config.to_str().unwrap().to_string();
    let commands: Vec<Vec<&str>> = vec![
        vec!["validate"],
        vec!["weights"],
        vec!["weights", "--rook"],
        vec!["lisa", "--field", "ivsm"],
        vec!["lisa", "--field", "var_perc"],
        vec!["lisa", "--field", "eta_q3"],
        vec!["lisa", "--field", "pc1"],
        vec!["coda", "pca"],
        vec!["coda", "pca", "--classes", "3"],
        vec!["coda", "permanova"],
        vec!["permanova", "--classes", "3"],
        vec!["fpca"],
        vec!["thresholds"],
        vec!["select"],
        vec!["rank"],
        vec!["provinces"],
        vec!["provinces", "--on-smoothed", "--k", "3"],
        vec!["export-geojson"],
    ];
    let run_all = |threads: &str| -> Result<(Artifacts, Artifacts), String> {
        let dir = fx.dir.path().join(format!("t{threads}"));
        let d = dir.to_str().unwrap();
        let mut per_command = Vec::new();
        for (k, c) in commands.iter().enumerate() {
            let mut args: Vec<&str> = c.clone();
            args.extend(["--config", &cfg, "--threads", threads, "--out", d]);
            let out = geovuln(&args);
            if !out.status.success() {
                return Err(format!("`{}` failed: {}", c.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
            }
            // snapshot after each command so an overwritten file is still compared
            for (name, bytes) in artifacts(&dir) {
                per_command.push((format!("{k}:{name}"), bytes));
            }
        }
        let pdir = fx.dir.path().join(format!("p{threads}"));
        let out = geovuln(&["pipeline", "--config", &cfg, "--threads", threads, "--out", pdir.to_str().unwrap()]);
        if !out.status.success() {
            return Err(format!("pipeline failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
        let ranks = std::fs::read_to_string(pdir.join("ranks.csv")).map_err(|e| e.to_string())?;
        let total: i64 = ranks.lines().skip(1).filter_map(|l| l.split(',').nth(4)?.parse::<i64>().ok()).sum();
        ensure(total == 0, || format!("pipeline Copeland scores sum to {total}"))?;
        Ok((per_command, artifacts(&pdir)))
    };
    let (a, pa) = run_all("1")?;
    let (b, pb) = run_all("8")?;
    let diff: Vec<&String> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    ensure(a.len() == b.len() && diff.is_empty(), || format!("outputs differ between 1 and 8 threads: {diff:?}"))?;
    let pdiff: Vec<&String> = pa.iter().zip(&pb).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    ensure(pa.len() == pb.len() && pdiff.is_empty(), || format!("pipeline outputs differ: {pdiff:?}"))?;
    Ok(format!(
        "{} subcommand invocations plus pipeline ({} files) byte-identical with 1 and 8 threads",
        commands.len(),
        pa.len()
    ))
}

// -------------------------------------------------------------- replication

struct Replication {
    dir: tempfile::TempDir,
    config: String,
}

fn num_at(v: &Value, path: &[&str]) -> Result<f64, String> {
    let mut cur = v;
    for p in path {
        cur = match p.parse::<usize>() {
            Ok(i) => &cur[i],
            Err(_) => &cur[*p],
        };
    }
    cur.as_f64().ok_or_else(|| format!("missing number at {}", path.join(".")))
}

fn within(name: &str, got: f64, want: f64, tol: f64) -> Result<String, String> {
    let s = format!("{name} = {got:.4} (target {want} +/- {tol})");
    if (got - want).abs() <= tol {
        Ok(s)
    } else {
        Err(s)
    }
}

fn collect(parts: Vec<Result<String, String>>) -> Check {
    let failed = parts.iter().any(|p| p.is_err());
    let text: Vec<String> = parts.into_iter().map(|p| p.unwrap_or_else(|e| format!("MISS {e}"))).collect();
    if failed {
        Err(text.join("; "))
    } else {
        Ok(text.join("; "))
    }
}

impl Replication {
    fn run(config: &Path) -> Result<Replication, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = config.display().to_string();
        let out = geovuln(&["pipeline", "--config", &config, "--out", dir.path().to_str().unwrap()]);
        if !out.status.success() {
            return Err(format!("pipeline failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
        Ok(Replication { dir, config })
    }

    fn get(&self, name: &str) -> Result<Value, String> {
        let p = self.dir.path().join(name);
        if !p.exists() {
            return Err(format!("{name} not produced"));
        }
        Ok(json(self.dir.path(), name))
    }

    fn moran(&self) -> Check {
        let mut parts = Vec::new();
        for (f, want) in [("ivsm", 0.644), ("var_perc", 0.401), ("eta_q3", 0.623), ("pc1", 0.506)] {
            parts.push(self.get(&format!("moran_{f}.json")).and_then(|v| {
                within(&format!("I({f})"), num_at(&v, &["morans_i"])?, want, 0.01)
            }));
        }
        collect(parts)
    }

    fn permanova(&self) -> Check {
        let v = self.get("permanova_9.json")?;
        let m = num_at(&v, &["permutations"])?;
        let p = num_at(&v, &["p_value"])?;
        let f0 = v["f0"].as_f64().ok_or("F0 is not finite")?;
        collect(vec![
            within("F0", f0, 54.35, 0.5),
            if p <= 2.0 / (m + 1.0) { Ok(format!("p = {p:.4} (M = {m})")) } else { Err(format!("p = {p:.4} (M = {m})")) },
        ])
    }

    fn pca(&self) -> Check {
        let nine = self.get("coda_pca_9.json")?;
        let three = self.get("coda_pca_3.json")?;
        collect(vec![
            within("explained PC1 (9 classes)", num_at(&nine, &["explained", "0"])?, 0.45, 0.02),
            within("sdev PC1", num_at(&nine, &["sdev", "0"])?, 1.67, 0.05),
            within("explained PC1 (ternary)", num_at(&three, &["explained", "0"])?, 0.86, 0.02),
        ])
    }

    fn selection(&self) -> Check {
        let th = self.get("thresholds.json")?;
        let want = [100.29, -4.64, 1.18];
        let all = th["all_quantile_types"].as_array().ok_or("no per-type thresholds")?;
        let round_ok = |t: &Value| -> bool {
            ["t_ivsm", "t_g", "t_b"]
                .iter()
                .zip(want)
                .all(|(k, w)| t[k].as_f64().is_some_and(|x| ((x * 100.0).round() / 100.0 - w).abs() < 1e-9))
        };
        let Some(hit) = all.iter().find(|t| round_ok(t)) else {
            let t = &th["thresholds"];
            return Err(format!(
                "no quantile type reproduces (100.29, -4.64, 1.18); type {} gives ({}, {}, {})",
                t["quantile_type"], t["t_ivsm"], t["t_g"], t["t_b"]
            ));
        };
        let qt = hit["quantile_type"].to_string();
        let out = geovuln(&["select", "--config", &self.config, "--quantile-type", &qt, "--out", self.dir.path().to_str().unwrap()]);
        if !out.status.success() {
            return Err(format!("select failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
        let sel = self.get("selection.json")?;
        let count = num_at(&sel, &["n_selected"])?;
        let mut parts = vec![if count == 247.0 {
            Ok(format!("type {qt}: 247 selected"))
        } else {
            Err(format!("type {qt}: {count} selected (target 247)"))
        }];
        for (k, w) in [0.07, 0.26, 0.46, 0.21].iter().enumerate() {
            let k = k.to_string();
            parts.push(within(&format!("share class {k}"), num_at(&sel, &["by_hazard_class", &k, "share"])?, *w, 0.02));
        }
        collect(parts)
    }

    fn copeland(&self) -> Check {
        let v = self.get("copeland_by_hazard.json")?;
        let sum = num_at(&v, &["sum_of_scores"])?;
        let inc = v["medians_increasing"].as_bool().unwrap_or(false);
        let meds: Vec<String> = v["classes"]
            .as_array()
            .map(|a| a.iter().map(|c| c["summary"]["median"].to_string()).collect())
            .unwrap_or_default();
        let s = format!("sum = {sum}, medians by class [{}]", meds.join(", "));
        if inc && sum == 0.0 {
            Ok(s)
        } else {
            Err(s)
        }
    }

    fn fpca(&self) -> Check {
        let v = self.get("fpca.json")?;
        collect(vec![
            within("explained PC1", num_at(&v, &["explained", "0"])?, 0.954, 0.01),
            within("corr(PC1, VAR_PERC)", num_at(&v, &["corr_pc1_var_perc"])?, 0.94, 0.02),
        ])
    }

    fn provinces(&self) -> Check {
        let v = self.get("provinces_summary.json")?;
        let table = [
            [97.09, 1.74, 96.13, 96.93, 97.80],
            [98.80, 1.44, 97.92, 98.72, 99.54],
            [100.29, 1.58, 99.29, 100.20, 101.13],
            [102.43, 2.67, 100.68, 102.08, 103.76],
        ];
        let clusters = v["clusters"].as_array().ok_or("no clusters")?;
        let order = v["clusters_by_mean"].as_array().ok_or("no cluster order")?;
        if order.len() != 4 {
            return Err(format!("{} clusters", order.len()));
        }
        let mut parts = Vec::new();
        for (row, label) in table.iter().zip(order) {
            let c = clusters.iter().find(|c| c["cluster"] == *label).ok_or("unknown cluster label")?;
            for (k, want) in ["mean", "sd", "q1", "q2", "q3"].iter().zip(row) {
                parts.push(within(&format!("cluster {label} {k}"), num_at(c, &[k])?, *want, 0.3));
            }
        }
        collect(parts)
    }
}

fn main() -> ExitCode {
    let mut rep = Report::default();
    let replication = std::env::var_os("GEOVULN_REPLICATION").map(|p| Replication::run(Path::new(&p)));
    let repl = |f: &dyn Fn(&Replication) -> Check| -> (bool, Check) {
        match &replication {
            None => (false, Err("replication dataset not available (set GEOVULN_REPLICATION)".into())),
            Some(Err(e)) => (true, Err(e.clone())),
            Some(Ok(r)) => (true, f(r)),
        }
    };

    let (e, r) = repl(&|r| r.moran());
    rep.line("1", "Moran's I replication", e, r);
    rep.line("1", "Moran's I fallback", true, moran_fallback());
    let (e, r) = repl(&|r| r.permanova());
    rep.line("2", "PERMANOVA replication", e, r);
    rep.line("2", "PERMANOVA fallback", true, permanova_fallback());
    let (e, r) = repl(&|r| r.pca());
    rep.line("3", "compositional PCA replication", e, r);
    rep.line("3", "compositional PCA fallback", true, coda_fallback());
    let (e, r) = repl(&|r| r.selection());
    rep.line("4", "selection replication", e, r);
    rep.line("4", "selection fallback", true, selection_fallback());
    rep.line("5", "Copeland invariants", true, copeland_fallback());
    let (e, r) = repl(&|r| r.copeland());
    rep.line("5", "Copeland stochastic order replication", e, r);
    let (e, r) = repl(&|r| r.fpca());
    rep.line("6", "FPCA replication", e, r);
    rep.line("6", "FPCA fallback", true, fpca_fallback());
    let (e, r) = repl(&|r| r.provinces());
    rep.line("7", "province clustering replication", e, r);
    rep.line("7", "province clustering fallback", true, clustering_fallback());
    rep.line("8", "determinism", true, determinism());

    println!(
        "acceptance: {} passed, {} failed, {} enforced failure(s)",
        rep.passed, rep.failed, rep.enforced_failures
    );
    if rep.enforced_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
