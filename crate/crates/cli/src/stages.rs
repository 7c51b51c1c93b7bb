//! Analysis stages. Each stage loads what it needs, writes its artifacts and records
//! itself in the run manifest.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use log::warn;
use serde::Serialize;

use geovuln_core::autocorr::{lisa, morans_i, stratify, LisaConfig, LisaResult};
use geovuln_core::coda::{coda_pca, permanova, ternary_compositions, CodaPcaResult, Composition};
use geovuln_core::distributional::{
    cluster_summary, distance_matrix, probability_grid, province_distributions, ward_cluster,
};
use geovuln_core::fda::{fpca, log_growth, smooth_all};
use geovuln_core::ingest::{parse_dataset, parse_population, validate, Dataset, IssueKind};
use geovuln_core::ranking::{
    compute_thresholds, copeland, hazard_classes, indicator_rankings, score_by_hazard, select,
    HazardClass,
};
use geovuln_core::spatial::{
    build_weights, contiguity_from_polygons, match_ids, parse_pairs, restrict_pairs,
    ContiguityOptions, SpatialWeights,
};
use geovuln_core::stats::{pearson, QuantileType};

use crate::config::{RunConfig, Settings};
use crate::geojson::{join_features, Table};
use crate::output::{num, opt, OutDir};

#[derive(Debug, Serialize)]
pub struct Skipped {
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub config: BTreeMap<String, String>,
    pub dataset_digest: Option<String>,
    pub stages_completed: Vec<String>,
    pub stages_skipped: Vec<Skipped>,
    pub error: Option<String>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

pub struct Run {
    pub settings: Settings,
    pub out: OutDir,
    pub manifest: Manifest,
    ds: Option<Dataset>,
    weights: Option<SpatialWeights>,
    pca: BTreeMap<usize, CodaPcaResult>,
}

impl Run {
    pub fn new(command: &str, cfg: &RunConfig) -> Result<Run> {
        let settings = cfg.settings()?;
        let out = OutDir::create(&settings.out)?;
        Ok(Run {
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                config: cfg.effective(),
                dataset_digest: None,
                stages_completed: Vec::new(),
                stages_skipped: Vec::new(),
                error: None,
                outputs: Vec::new(),
                warnings: Vec::new(),
            },
            settings,
            out,
            ds: None,
            weights: None,
            pca: BTreeMap::new(),
        })
    }

    fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        warn!("{msg}");
        self.manifest.warnings.push(msg);
    }

    fn done(&mut self, stage: &str) {
        self.manifest.stages_completed.push(stage.to_string());
    }

    pub fn skip(&mut self, stage: &str, reason: impl Into<String>) {
        let reason = reason.into();
        warn!("stage {stage} skipped: {reason}");
        self.manifest.stages_skipped.push(Skipped {
            stage: stage.to_string(),
            reason,
        });
    }

    /// Writes `<command>.manifest.json`; called once at the end of every command.
    pub fn finish(&mut self, error: Option<String>) -> Result<()> {
        self.manifest.error = error;
        self.manifest.outputs = self.out.written().to_vec();
        let name = format!("{}.manifest.json", self.manifest.command);
        let manifest = serde_json::to_value(&self.manifest)?;
        self.out.write_json(&name, &manifest)
    }

    pub fn dataset(&mut self) -> Result<&Dataset> {
        if self.ds.is_none() {
            let s = &self.settings;
            let path = s
                .indicators
                .clone()
                .ok_or_else(|| anyhow!("no indicator table configured (set `indicators` or --indicators)"))?;
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let mut ds = parse_dataset(&text, &s.column_map, s.zero_delta_factor)
                .with_context(|| format!("parsing {}", path.display()))?;
            if let Some(pop) = s.population.clone() {
                let text = std::fs::read_to_string(&pop)
                    .with_context(|| format!("reading {}", pop.display()))?;
                let series = parse_population(&text).with_context(|| format!("parsing {}", pop.display()))?;
                let (joined, warnings) = ds.with_population(series);
                ds = joined;
                for w in warnings {
                    self.warn(w);
                }
            }
            self.manifest.dataset_digest = Some(ds.digest().to_string());
            self.ds = Some(ds);
        }
        Ok(self.ds.as_ref().expect("loaded"))
    }

    fn ds(&self) -> &Dataset {
        self.ds.as_ref().expect("dataset loaded")
    }

    pub fn has_adjacency(&self) -> bool {
        self.settings.adjacency.is_some() || self.settings.geometry.is_some()
    }

    fn load_weights(&mut self) -> Result<()> {
        if self.weights.is_some() {
            return Ok(());
        }
        self.dataset()?;
        let s = self.settings.clone();
        let pairs = if let Some(adj) = &s.adjacency {
            let text = std::fs::read_to_string(adj).with_context(|| format!("reading {}", adj.display()))?;
            parse_pairs(&text)?
        } else if let Some(geo) = &s.geometry {
            let text = std::fs::read_to_string(geo).with_context(|| format!("reading {}", geo.display()))?;
            let opts = ContiguityOptions {
                snap_tolerance: s.snap_tolerance,
                rook: s.rook,
            };
            let c = contiguity_from_polygons(&text, &s.geometry_id_property, opts)?;
            for w in c.warnings {
                self.warn(w);
            }
            let report = match_ids(&c.feature_ids, self.ds());
            if !report.missing_geometry.is_empty() {
                self.warn(format!(
                    "{} unit(s) without geometry (treated as islands): {}",
                    report.missing_geometry.len(),
                    report.missing_geometry.join(", ")
                ));
            }
            if !report.unknown_features.is_empty() {
                self.warn(format!(
                    "{} feature(s) not in the indicator table: {}",
                    report.unknown_features.len(),
                    report.unknown_features.join(", ")
                ));
            }
            c.pairs
        } else {
            bail!("no adjacency source configured (set `adjacency` or `geometry`)");
        };
        let kept = restrict_pairs(&pairs, self.ds());
        if kept.len() < pairs.len() {
            self.warn(format!(
                "{} adjacency pair(s) mention units outside the indicator table and were dropped",
                pairs.len() - kept.len()
            ));
        }
        let w = build_weights(self.ds(), &kept)?;
        if w.island_count() > 0 {
            self.warn(format!("{} island unit(s) excluded from autocorrelation", w.island_count()));
        }
        self.weights = Some(w);
        Ok(())
    }

    fn compositions(&mut self, classes: usize) -> Result<Vec<Composition>> {
        let ds = self.dataset()?;
        Ok(match classes {
            9 => ds.records().iter().map(|r| r.building_comp.clone()).collect(),
            3 => ternary_compositions(ds)?,
            c => bail!("unsupported class count {c}"),
        })
    }

    fn pca_result(&mut self, classes: usize) -> Result<&CodaPcaResult> {
        if !self.pca.contains_key(&classes) {
            let comps = self.compositions(classes)?;
            let res = coda_pca(&comps, self.settings.pca_scaling)?;
            for w in &res.warnings {
                self.warn(format!("coda pca ({classes} classes): {w}"));
            }
            self.pca.insert(classes, res);
        }
        Ok(&self.pca[&classes])
    }

    fn pc1(&mut self) -> Result<Vec<f64>> {
        let classes = self.settings.classes;
        Ok(self.pca_result(classes)?.pc1_scores())
    }

    pub fn validate_stage(&mut self, strict: bool) -> Result<usize> {
        let report = validate(self.dataset()?);
        let n = self.ds().len();
        let kinds = [
            IssueKind::IvsmOutOfRange,
            IssueKind::NegativeAgMax,
            IssueKind::ZeroComposition,
            IssueKind::MissingPopSeries,
            IssueKind::PopSeriesLength,
            IssueKind::NonPositivePopulation,
        ];
        let counts: BTreeMap<String, usize> = kinds
            .iter()
            .map(|k| {
                let key = serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_string));
                (key.unwrap_or_default(), report.count(*k))
            })
            .collect();
        #[derive(Serialize)]
        struct Summary<'a> {
            n_units: usize,
            n_issues: usize,
            issue_counts: BTreeMap<String, usize>,
            issues: &'a [geovuln_core::ingest::Issue],
        }
        self.out.write_bytes("validation.txt", report.to_text().as_bytes())?;
        self.out.write_json(
            "validation.json",
            &Summary {
                n_units: n,
                n_issues: report.issues.len(),
                issue_counts: counts,
                issues: &report.issues,
            },
        )?;
        self.done("validate");
        if strict && !report.is_empty() {
            bail!("{} validation issue(s) found", report.issues.len());
        }
        Ok(report.issues.len())
    }

    pub fn weights_stage(&mut self) -> Result<()> {
        self.load_weights()?;
        let w = self.weights.as_ref().expect("loaded");
        let ids = w.unit_ids();
        let mut rows = Vec::with_capacity(w.total_links());
        for i in 0..w.len() {
            for (j, wij) in w.neighbors(i).iter().zip(w.weights(i)) {
                rows.push([ids[i].clone(), ids[*j].clone(), num(*wij)]);
            }
        }
        #[derive(Serialize)]
        struct Summary {
            n_units: usize,
            n_links: usize,
            n_islands: usize,
            islands: Vec<String>,
            source: String,
            rook: bool,
        }
        let summary = Summary {
            n_units: w.len(),
            n_links: w.total_links(),
            n_islands: w.island_count(),
            islands: (0..w.len()).filter(|i| w.is_island(*i)).map(|i| ids[i].clone()).collect(),
            source: if self.settings.adjacency.is_some() { "adjacency" } else { "geometry" }.to_string(),
            rook: self.settings.rook && self.settings.adjacency.is_none(),
        };
        self.out.write_csv("weights.csv", &["unit_id", "neighbor_id", "weight"], rows)?;
        self.out.write_json("weights_summary.json", &summary)?;
        self.done("weights");
        Ok(())
    }

    fn field_values(&mut self, field: &str) -> Result<Vec<f64>> {
        let ds = self.dataset()?;
        Ok(match field {
            "ivsm" => ds.column(|r| r.ivsm),
            "var_perc" => ds.column(|r| r.var_perc),
            "eta_q3" => ds.column(|r| r.eta_q3),
            "pc1" => self.pc1()?,
            f => bail!("unknown LISA field `{f}`"),
        })
    }

    pub fn lisa_stage(&mut self, field: &str) -> Result<()> {
        let values = self.field_values(field)?;
        self.load_weights()?;
        let w = self.weights.as_ref().expect("loaded");
        let cfg = LisaConfig {
            permutations: self.settings.lisa_permutations,
            alpha: self.settings.alpha,
            seed: self.settings.seed,
        };
        let i = morans_i(w, &values).with_context(|| format!("Moran's I of {field}"))?;
        let res = lisa(w, &values, cfg)?;
        let n_connected = w.len() - w.island_count();
        let ag = self.ds().column(|r| r.ag_max);
        let hot = stratify(&res, &ag)?;
        let quad_counts = |sig_only: bool| -> BTreeMap<&'static str, usize> {
            let mut m = BTreeMap::new();
            for r in &res {
                if !sig_only || r.significant {
                    *m.entry(r.quadrant.as_str()).or_insert(0) += 1;
                }
            }
            m
        };
        #[derive(Serialize)]
        struct Summary {
            field: String,
            morans_i: f64,
            n_units: usize,
            n_connected: usize,
            permutations: usize,
            alpha: f64,
            seed: u64,
            quadrants: BTreeMap<&'static str, usize>,
            significant: BTreeMap<&'static str, usize>,
            hotspots_by_hazard: BTreeMap<String, usize>,
        }
        let mut by_hazard = BTreeMap::new();
        for h in &hot {
            *by_hazard
                .entry(format!("{}_{}", h.base_class.as_str(), h.hazard_macro.as_str()))
                .or_insert(0) += 1;
        }
        let summary = Summary {
            field: field.to_string(),
            morans_i: i,
            n_units: res.len(),
            n_connected,
            permutations: cfg.permutations,
            alpha: cfg.alpha,
            seed: cfg.seed,
            quadrants: quad_counts(false),
            significant: quad_counts(true),
            hotspots_by_hazard: by_hazard,
        };
        let rows = res.iter().map(|r: &LisaResult| {
            [
                r.unit_id.clone(),
                num(r.z),
                opt(r.lag),
                opt(r.local_i),
                opt(r.p_value),
                r.quadrant.as_str().to_string(),
                r.significant.to_string(),
            ]
        });
        self.out.write_csv(
            &format!("lisa_{field}.csv"),
            &["unit_id", "z", "lag", "local_i", "p_value", "quadrant", "significant"],
            rows,
        )?;
        let scatter = res.iter().zip(&values).filter(|(r, _)| r.lag.is_some()).map(|(r, v)| {
            [r.unit_id.clone(), num(*v), num(r.z), opt(r.lag), r.quadrant.as_str().to_string()]
        });
        self.out.write_csv(
            &format!("scatter_{field}.csv"),
            &["unit_id", "value", "z", "lag", "quadrant"],
            scatter,
        )?;
        let hot_rows = hot.iter().map(|h| {
            [h.unit_id.clone(), h.base_class.as_str().to_string(), h.hazard_macro.as_str().to_string()]
        });
        self.out.write_csv(&format!("hotspots_{field}.csv"), &["unit_id", "quadrant", "hazard"], hot_rows)?;
        self.out.write_json(&format!("moran_{field}.json"), &summary)?;
        self.done(&format!("lisa:{field}"));
        Ok(())
    }

    pub fn pca_stage(&mut self, classes: usize) -> Result<()> {
        let ids = self.dataset()?.unit_ids();
        let res = self.pca_result(classes)?.clone();
        let k = res.loadings.len();
        let mut header = vec!["unit_id".to_string()];
        header.extend((1..=k).map(|c| format!("pc{c}_score")));
        let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = ids.iter().zip(&res.scores).map(|(id, s)| {
            let mut row = vec![id.clone()];
            row.extend(s.iter().map(|v| num(*v)));
            row
        });
        self.out.write_csv(&format!("coda_pca_{classes}.csv"), &header_ref, rows)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            classes: usize,
            parts: Vec<&'static str>,
            center: &'a [f64],
            loadings: &'a [Vec<f64>],
            explained: &'a [f64],
            sdev: &'a [f64],
            scaling: geovuln_core::coda::PcaScaling,
            degenerate: bool,
            warnings: &'a [String],
        }
        self.out.write_json(
            &format!("coda_pca_{classes}.json"),
            &Summary {
                classes,
                parts: res.center.labels().names().map(|n| n.to_vec()).unwrap_or_default(),
                center: res.center.parts(),
                loadings: &res.loadings,
                explained: &res.explained,
                sdev: &res.sdev,
                scaling: res.scaling,
                degenerate: res.degenerate,
                warnings: &res.warnings,
            },
        )?;
        self.done(&format!("coda_pca:{classes}"));
        Ok(())
    }

    pub fn permanova_stage(&mut self, classes: usize) -> Result<()> {
        let comps = self.compositions(classes)?;
        let hz = hazard_classes(self.ds())?;
        // groups are the hazard classes actually present, in class order
        let mut present: Vec<HazardClass> = hz.clone();
        present.sort();
        present.dedup();
        let groups: Vec<usize> = hz
            .iter()
            .map(|c| present.iter().position(|p| p == c).expect("present"))
            .collect();
        let res = permanova(&comps, &groups, self.settings.permanova_permutations, self.settings.seed)?;
        #[derive(Serialize)]
        struct Report<'a> {
            classes: usize,
            groups: Vec<&'static str>,
            f0: Option<f64>,
            f0_infinite: bool,
            p_value: f64,
            ss_t: f64,
            ss_w: f64,
            group_sizes: &'a [usize],
            df_between: usize,
            df_within: usize,
            permutations: usize,
            seed: u64,
            note: &'a Option<String>,
        }
        self.out.write_json(
            &format!("permanova_{classes}.json"),
            &Report {
                classes,
                groups: present.iter().map(|c| c.label()).collect(),
                f0: res.f0.is_finite().then_some(res.f0),
                f0_infinite: res.f0.is_infinite(),
                p_value: res.p_value,
                ss_t: res.ss_t,
                ss_w: res.ss_w,
                group_sizes: &res.group_sizes,
                df_between: res.df_between,
                df_within: res.df_within,
                permutations: res.permutations,
                seed: res.seed,
                note: &res.note,
            },
        )?;
        self.done(&format!("permanova:{classes}"));
        Ok(())
    }

    pub fn thresholds_stage(&mut self) -> Result<()> {
        let pc1 = self.pc1()?;
        let qt = self.settings.quantile_type;
        let th = compute_thresholds(self.ds(), &pc1, qt)?;
        let mut all = Vec::new();
        for t in 1..=9 {
            all.push(compute_thresholds(self.ds(), &pc1, QuantileType::new(t)?)?);
        }
        #[derive(Serialize)]
        struct Report {
            n_units: usize,
            classes: usize,
            thresholds: geovuln_core::SelectionThresholds,
            all_quantile_types: Vec<geovuln_core::SelectionThresholds>,
        }
        self.out.write_json(
            "thresholds.json",
            &Report {
                n_units: self.ds().len(),
                classes: self.settings.classes,
                thresholds: th,
                all_quantile_types: all,
            },
        )?;
        self.done("thresholds");
        Ok(())
    }

    pub fn select_stage(&mut self) -> Result<()> {
        let pc1 = self.pc1()?;
        let th = compute_thresholds(self.ds(), &pc1, self.settings.quantile_type)?;
        let sel = select(self.ds(), &pc1, &th)?;
        let ds = self.ds();
        let rows: Vec<[String; 6]> = sel
            .indices
            .iter()
            .map(|&i| {
                let r = &ds.records()[i];
                let hz = HazardClass::from_ag_max(r.ag_max).map(|c| c.label()).unwrap_or("");
                [r.unit_id.clone(), num(r.ivsm), num(r.var_perc), num(pc1[i]), num(r.ag_max), hz.to_string()]
            })
            .collect();
        self.out.write_csv(
            "selection.csv",
            &["unit_id", "ivsm", "var_perc", "pc1_score", "ag_max", "hazard_class"],
            rows,
        )?;
        #[derive(Serialize)]
        struct ClassRow {
            hazard_class: &'static str,
            count: usize,
            share: f64,
        }
        #[derive(Serialize)]
        struct Report {
            thresholds: geovuln_core::SelectionThresholds,
            n_units: usize,
            n_selected: usize,
            expected_independent: f64,
            sd_independent: f64,
            by_hazard_class: Vec<ClassRow>,
        }
        self.out.write_json(
            "selection.json",
            &Report {
                thresholds: th,
                n_units: sel.n_total,
                n_selected: sel.indices.len(),
                expected_independent: sel.expected_independent,
                sd_independent: sel.sd_independent,
                by_hazard_class: HazardClass::ALL
                    .iter()
                    .map(|c| ClassRow {
                        hazard_class: c.label(),
                        count: sel.class_counts[c.index()],
                        share: sel.class_shares[c.index()],
                    })
                    .collect(),
            },
        )?;
        self.done("select");
        Ok(())
    }

    pub fn rank_stage(&mut self) -> Result<()> {
        let pc1 = self.pc1()?;
        let ds = self.ds();
        let ranks = indicator_rankings(ds, &pc1)?;
        let scores = copeland(&ds.unit_ids(), &ranks)?;
        let hz = hazard_classes(ds)?;
        let report = score_by_hazard(&scores, &hz)?;
        let rows: Vec<[String; 6]> = scores
            .iter()
            .zip(&hz)
            .map(|(c, h)| {
                [
                    c.unit_id.clone(),
                    c.r1.to_string(),
                    c.r2.to_string(),
                    c.r3.to_string(),
                    c.copeland.to_string(),
                    h.label().to_string(),
                ]
            })
            .collect();
        self.out.write_csv(
            "ranks.csv",
            &["unit_id", "rank_ivsm", "rank_var_perc", "rank_pc1", "copeland", "hazard_class"],
            rows,
        )?;
        #[derive(Serialize)]
        struct ClassRow {
            hazard_class: &'static str,
            n: usize,
            summary: Option<geovuln_core::stats::FiveNumber>,
        }
        #[derive(Serialize)]
        struct Report<'a> {
            sum_of_scores: i64,
            classes: Vec<ClassRow>,
            dominance: &'a [geovuln_core::ranking::Dominance],
            medians_increasing: bool,
        }
        self.out.write_json(
            "copeland_by_hazard.json",
            &Report {
                sum_of_scores: scores.iter().map(|c| c.copeland).sum(),
                classes: report
                    .classes
                    .iter()
                    .map(|c| ClassRow {
                        hazard_class: c.label,
                        n: c.n,
                        summary: c.summary,
                    })
                    .collect(),
                dominance: &report.dominance,
                medians_increasing: report.medians_increasing,
            },
        )?;
        self.done("rank");
        Ok(())
    }

    pub fn fpca_stage(&mut self) -> Result<()> {
        let (curves, warnings) = log_growth(self.dataset()?);
        if !warnings.is_empty() {
            let n = warnings.len();
            let first: Vec<String> = warnings.into_iter().take(5).collect();
            self.warn(format!("{n} unit(s) without a usable population series, e.g. {}", first.join("; ")));
        }
        if curves.len() < 2 {
            bail!("fewer than two complete population series");
        }
        let smoothed = smooth_all(&curves)?;
        let res = fpca(&smoothed)?;
        let ds = self.ds();
        let var_perc: Vec<f64> = res
            .unit_ids
            .iter()
            .map(|id| ds.get(id).map(|r| r.var_perc).expect("id from dataset"))
            .collect();
        let pc1 = res.pc1_scores();
        let corr = pearson(&pc1, &var_perc);
        let k = res.harmonics.len();
        let mut header = vec!["unit_id".to_string()];
        header.extend((1..=k).map(|c| format!("pc{c}_score")));
        let hr: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = res.unit_ids.iter().zip(&res.scores).map(|(id, s)| {
            let mut row = vec![id.clone()];
            row.extend(s.iter().map(|v| num(*v)));
            row
        });
        self.out.write_csv("fpca_scores.csv", &hr, rows)?;
        let mut header = vec!["year".to_string(), "mean".to_string()];
        header.extend((1..=k).map(|c| format!("harmonic{c}")));
        let hr: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = res.grid.iter().enumerate().map(|(t, y)| {
            let mut row = vec![num(*y), num(res.mean_curve[t])];
            row.extend(res.harmonics.iter().map(|h| num(h[t])));
            row
        });
        self.out.write_csv("fpca_harmonics.csv", &hr, rows)?;
        let mut curve_rows = Vec::new();
        for (c, s) in curves.iter().zip(&smoothed) {
            for (t, y) in c.years.iter().enumerate() {
                curve_rows.push([c.unit_id.clone(), y.to_string(), num(c.log_growth[t]), num(s.fitted[t])]);
            }
        }
        self.out.write_csv("fpca_curves.csv", &["unit_id", "year", "log_growth", "fitted"], curve_rows)?;
        let scatter = res
            .unit_ids
            .iter()
            .zip(pc1.iter().zip(&var_perc))
            .map(|(id, (p, v))| [id.clone(), num(*p), num(*v)]);
        self.out.write_csv("scatter_fpca_var_perc.csv", &["unit_id", "fpca_pc1", "var_perc"], scatter)?;
        #[derive(Serialize)]
        struct Report<'a> {
            n_curves: usize,
            explained: &'a [f64],
            eigenvalues: &'a [f64],
            corr_pc1_var_perc: f64,
            degenerate: bool,
        }
        self.out.write_json(
            "fpca.json",
            &Report {
                n_curves: res.unit_ids.len(),
                explained: &res.explained,
                eigenvalues: &res.eigenvalues,
                corr_pc1_var_perc: corr,
                degenerate: res.degenerate,
            },
        )?;
        self.done("fpca");
        Ok(())
    }

    pub fn provinces_stage(&mut self) -> Result<()> {
        let (k_grid, bw, k, smoothed) = (
            self.settings.grid_size,
            self.settings.bandwidth,
            self.settings.k,
            self.settings.on_smoothed,
        );
        let (mut dists, warnings) = province_distributions(self.dataset()?, k_grid)?;
        for w in warnings {
            self.warn(w);
        }
        if smoothed {
            dists = dists.iter().map(|d| d.smoothed(bw)).collect::<geovuln_core::Result<_>>()?;
        }
        dists = dists
            .into_iter()
            .map(|d| d.with_density(bw))
            .collect::<geovuln_core::Result<_>>()?;
        if k > dists.len() {
            bail!("cannot cut {} provinces into {k} clusters", dists.len());
        }
        let dm = distance_matrix(&dists)?;
        let dend = ward_cluster(&dm)?;
        let labels = dend.cut(k)?;
        let summary = cluster_summary(&labels, &dists)?;
        let ids: Vec<String> = dists.iter().map(|d| d.province_id.clone()).collect();

        let mut header = vec!["province_id".to_string()];
        header.extend(ids.iter().cloned());
        let hr: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = ids.iter().zip(&dm).map(|(id, row)| {
            let mut r = vec![id.clone()];
            r.extend(row.iter().map(|d| num(*d)));
            r
        });
        self.out.write_csv("provinces_distance.csv", &hr, rows)?;
        let n = ids.len();
        let name = |c: usize| if c < n { ids[c].clone() } else { format!("cluster{c}") };
        let rows = dend.merges.iter().enumerate().map(|(s, m)| {
            [(s + 1).to_string(), name(m.a), name(m.b), num(m.height), m.size.to_string()]
        });
        self.out.write_csv("provinces_merges.csv", &["step", "a", "b", "height", "size"], rows)?;
        let rows = ids.iter().zip(&labels).map(|(id, l)| [id.clone(), l.to_string()]);
        self.out.write_csv("provinces_labels.csv", &["province_id", "cluster"], rows)?;
        let grid = probability_grid(k_grid);
        let mut header = vec!["t".to_string()];
        header.extend(summary.iter().map(|c| format!("cluster{}", c.label)));
        let hr: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = grid.iter().enumerate().map(|(t, p)| {
            let mut r = vec![num(*p)];
            r.extend(summary.iter().map(|c| num(c.barycenter[t])));
            r
        });
        self.out.write_csv("provinces_barycenters.csv", &hr, rows)?;
        let mut dens_rows = Vec::new();
        for d in &dists {
            if let Some(curve) = &d.density {
                for (x, y) in curve.x.iter().zip(&curve.density) {
                    dens_rows.push([d.province_id.clone(), num(*x), num(*y)]);
                }
            }
        }
        self.out.write_csv("provinces_density.csv", &["province_id", "x", "density"], dens_rows)?;
        #[derive(Serialize)]
        struct ClusterRow<'a> {
            cluster: usize,
            n_provinces: usize,
            mean: f64,
            sd: f64,
            q1: f64,
            q2: f64,
            q3: f64,
            members: &'a [String],
        }
        #[derive(Serialize)]
        struct Report<'a> {
            k: usize,
            grid_size: usize,
            bandwidth: f64,
            on_smoothed: bool,
            n_provinces: usize,
            clusters: Vec<ClusterRow<'a>>,
            clusters_by_mean: Vec<usize>,
        }
        let mut by_mean: Vec<usize> = (0..summary.len()).collect();
        by_mean.sort_by(|a, b| summary[*a].mean.total_cmp(&summary[*b].mean));
        self.out.write_json(
            "provinces_summary.json",
            &Report {
                k,
                grid_size: k_grid,
                bandwidth: bw,
                on_smoothed: smoothed,
                n_provinces: n,
                clusters: summary
                    .iter()
                    .map(|c| ClusterRow {
                        cluster: c.label,
                        n_provinces: c.members.len(),
                        mean: c.mean,
                        sd: c.sd,
                        q1: c.q1,
                        q2: c.q2,
                        q3: c.q3,
                        members: &c.members,
                    })
                    .collect(),
                clusters_by_mean: by_mean.iter().map(|i| summary[*i].label).collect(),
            },
        )?;
        self.done("provinces");
        Ok(())
    }

    /// Joins `tables` (defaulting to the standard result files present in the output
    /// directory) onto the configured geometry.
    pub fn export_geojson_stage(&mut self, tables: &[std::path::PathBuf]) -> Result<()> {
        let geo = self.settings.geometry.clone().ok_or_else(|| {
            anyhow!("export-geojson needs a geometry file (set `geometry` or --geometry)")
        })?;
        let paths: Vec<std::path::PathBuf> = if tables.is_empty() {
            let mut found: Vec<std::path::PathBuf> = std::fs::read_dir(self.out.root())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.ends_with(".csv")
                        && (name.starts_with("lisa_")
                            || name.starts_with("coda_pca_")
                            || name == "ranks.csv"
                            || name == "fpca_scores.csv")
                })
                .collect();
            found.sort();
            found
        } else {
            tables.to_vec()
        };
        if paths.is_empty() {
            bail!("no result tables found to join; run other stages first or pass --results");
        }
        let tables: Vec<Table> = paths.iter().map(|p| Table::read(p)).collect::<Result<_>>()?;
        let text = std::fs::read_to_string(&geo).with_context(|| format!("reading {}", geo.display()))?;
        let (doc, warnings) = join_features(&text, &self.settings.geometry_id_property, &tables)?;
        for w in warnings {
            self.warn(w);
        }
        self.out.write_bytes("results.geojson", doc.as_bytes())?;
        self.done("export-geojson");
        Ok(())
    }

    /// The full sequence; optional stages that fail are recorded and skipped.
    pub fn pipeline(&mut self) -> Result<()> {
        self.validate_stage(false).context("stage validate")?;
        let spatial = self.has_adjacency();
        if spatial {
            self.weights_stage().context("stage weights")?;
            for f in self.settings.lisa_fields.clone() {
                if f != "pc1" {
                    self.lisa_stage(&f).with_context(|| format!("stage lisa:{f}"))?;
                }
            }
        } else {
            self.skip("weights", "no adjacency or geometry configured");
            self.skip("lisa", "no adjacency or geometry configured");
        }
        for c in [9, 3] {
            self.pca_stage(c).with_context(|| format!("stage coda_pca:{c}"))?;
        }
        let classes = self.settings.classes;
        self.permanova_stage(classes).with_context(|| format!("stage permanova:{classes}"))?;
        if spatial {
            self.lisa_stage("pc1").context("stage lisa:pc1")?;
        }
        self.thresholds_stage().context("stage thresholds")?;
        self.select_stage().context("stage select")?;
        self.rank_stage().context("stage rank")?;
        if self.settings.population.is_none() {
            self.skip("fpca", "no population series configured");
        } else if let Err(e) = self.fpca_stage() {
            self.skip("fpca", format!("failed: {e:#}"));
        }
        self.provinces_stage().context("stage provinces")?;
        if self.settings.geometry.is_none() {
            self.skip("export-geojson", "no geometry configured");
        } else if let Err(e) = self.export_geojson_stage(&[]) {
            self.skip("export-geojson", format!("failed: {e:#}"));
        }
        Ok(())
    }
}
