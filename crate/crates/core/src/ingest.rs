//! Indicator table and population series ingestion.
//!
//! Records are kept in ascending `unit_id` order; every downstream random stream is keyed
//! on that order and on the ids themselves.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::coda::{Composition, LabelSet};
use crate::error::{Error, Result};

/// Time-of-construction classes of the building stock, oldest first.
pub const BUILDING_CLASSES: [&str; 9] = [
    "<1919",
    "1919-45",
    "1946-60",
    "1961-70",
    "1971-80",
    "1981-90",
    "1991-2000",
    "2001-05",
    ">2005",
];

pub const POP_FIRST_YEAR: i32 = 1992;
pub const POP_LAST_YEAR: i32 = 2012;
pub const POP_YEARS: usize = (POP_LAST_YEAR - POP_FIRST_YEAR + 1) as usize;

/// Fraction of the column-minimum nonzero share used to fill zero parts.
pub const DEFAULT_ZERO_DELTA_FACTOR: f64 = 0.65;

/// Logical fields of the indicator table, in canonical column order.
pub const FIELDS: [&str; 18] = [
    "unit_id",
    "name",
    "province_id",
    "region_id",
    "ag_max",
    "ivsm",
    "var_perc",
    "eta_q3",
    "pop",
    "bc_pre1919",
    "bc_1919_1945",
    "bc_1946_1960",
    "bc_1961_1970",
    "bc_1971_1980",
    "bc_1981_1990",
    "bc_1991_2000",
    "bc_2001_2005",
    "bc_post2005",
];

const FIRST_SHARE_FIELD: usize = 9;

/// Maps logical field names to header names in the input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    headers: BTreeMap<&'static str, String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            headers: FIELDS.iter().map(|f| (*f, f.to_string())).collect(),
        }
    }
}

impl ColumnMap {
    pub fn set(&mut self, field: &str, header: impl Into<String>) -> Result<()> {
        let key = FIELDS
            .iter()
            .find(|f| **f == field)
            .ok_or_else(|| Error::invalid(format!("unknown column field `{field}`")))?;
        self.headers.insert(key, header.into());
        Ok(())
    }

    /// Applies every `column.<field> = <header>` entry of a key=value configuration.
    pub fn from_config(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut map = ColumnMap::default();
        for (k, v) in entries {
            if let Some(field) = k.strip_prefix("column.") {
                map.set(field, v.clone())?;
            }
        }
        Ok(map)
    }

    pub fn header(&self, field: &str) -> &str {
        &self.headers[field]
    }

    fn headers_in_order(&self) -> impl Iterator<Item = &str> {
        FIELDS.iter().map(move |f| self.headers[f].as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopSeries {
    pub years: Vec<i32>,
    pub counts: Vec<u64>,
}

impl PopSeries {
    /// True when the series covers exactly 1992..=2012.
    pub fn is_complete(&self) -> bool {
        self.years.len() == POP_YEARS
            && self
                .years
                .iter()
                .zip(POP_FIRST_YEAR..=POP_LAST_YEAR)
                .all(|(a, b)| *a == b)
    }
}

/// One row of the indicator table before zero replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub unit_id: String,
    pub name: String,
    pub province_id: String,
    pub region_id: String,
    pub ag_max: f64,
    pub ivsm: f64,
    pub var_perc: f64,
    pub eta_q3: f64,
    pub pop: u64,
    /// Shares (or counts) exactly as read; closure happens at dataset construction.
    pub building_shares: [f64; 9],
    pub pop_series: Option<PopSeries>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MunicipalityRecord {
    pub unit_id: String,
    pub name: String,
    pub province_id: String,
    pub region_id: String,
    pub ag_max: f64,
    pub ivsm: f64,
    pub var_perc: f64,
    pub eta_q3: f64,
    pub pop: u64,
    pub building_shares: [f64; 9],
    /// Closed, zero-replaced building-stock composition.
    pub building_comp: Composition,
    /// Number of parts that were zero before replacement.
    pub replaced_zeros: usize,
    pub pop_series: Option<PopSeries>,
}

impl MunicipalityRecord {
    /// Closed shares, zeros kept.
    pub fn closed_shares(&self) -> [f64; 9] {
        let mut out = self.building_shares;
        closure_in_place(&mut out);
        out
    }

    fn raw(&self) -> RawRecord {
        RawRecord {
            unit_id: self.unit_id.clone(),
            name: self.name.clone(),
            province_id: self.province_id.clone(),
            region_id: self.region_id.clone(),
            ag_max: self.ag_max,
            ivsm: self.ivsm,
            var_perc: self.var_perc,
            eta_q3: self.eta_q3,
            pop: self.pop,
            building_shares: self.building_shares,
            pop_series: self.pop_series.clone(),
        }
    }
}

/// Immutable, id-ordered collection of records.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<MunicipalityRecord>,
    index: HashMap<String, usize>,
    province_index: BTreeMap<String, Vec<String>>,
    delta_factor: f64,
    digest: String,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.delta_factor == other.delta_factor
    }
}

impl Dataset {
    /// Sorts rows by id, closes the compositions and applies multiplicative zero replacement
    /// with `delta_factor` times the column-minimum nonzero share.
    pub fn from_raw(mut rows: Vec<RawRecord>, delta_factor: f64) -> Result<Self> {
        if !(delta_factor > 0.0 && delta_factor < 1.0) {
            return Err(Error::invalid(format!(
                "zero delta factor must lie in (0,1), got {delta_factor}"
            )));
        }
        rows.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        for w in rows.windows(2) {
            if w[0].unit_id == w[1].unit_id {
                return Err(Error::DuplicateUnit(w[0].unit_id.clone()));
            }
        }
        let mut closed = Vec::with_capacity(rows.len());
        for r in &rows {
            let mut s = r.building_shares;
            if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::domain(format!(
                    "unit {}: building shares must be finite and nonnegative",
                    r.unit_id
                )));
            }
            if s.iter().sum::<f64>() <= 0.0 {
                return Err(Error::domain(format!(
                    "unit {}: all-zero building composition",
                    r.unit_id
                )));
            }
            closure_in_place(&mut s);
            closed.push(s);
        }
        let deltas = column_deltas(&closed, delta_factor);
        let mut records = Vec::with_capacity(rows.len());
        for (r, s) in rows.into_iter().zip(closed) {
            let zeros = s.iter().filter(|x| **x == 0.0).count();
            let parts = replace_zeros_with(&s, &deltas)
                .map_err(|e| Error::domain(format!("unit {}: {e}", r.unit_id)))?;
            let building_comp = Composition::from_closed(parts, LabelSet::Building)?;
            records.push(MunicipalityRecord {
                unit_id: r.unit_id,
                name: r.name,
                province_id: r.province_id,
                region_id: r.region_id,
                ag_max: r.ag_max,
                ivsm: r.ivsm,
                var_perc: r.var_perc,
                eta_q3: r.eta_q3,
                pop: r.pop,
                building_shares: r.building_shares,
                building_comp,
                replaced_zeros: zeros,
                pop_series: r.pop_series,
            });
        }
        Ok(Self::assemble(records, delta_factor))
    }

    fn assemble(records: Vec<MunicipalityRecord>, delta_factor: f64) -> Self {
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.unit_id.clone(), i))
            .collect();
        let mut province_index: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in &records {
            province_index
                .entry(r.province_id.clone())
                .or_default()
                .push(r.unit_id.clone());
        }
        let mut ds = Dataset {
            records,
            index,
            province_index,
            delta_factor,
            digest: String::new(),
        };
        ds.digest = ds.compute_digest();
        ds
    }

    fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        write_indicators(self, &ColumnMap::default(), &mut buf).expect("in-memory write");
        h.update(&buf);
        buf.clear();
        write_population(self, &mut buf).expect("in-memory write");
        h.update(&buf);
        h.update(self.delta_factor.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn records(&self) -> &[MunicipalityRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, unit_id: &str) -> Option<usize> {
        self.index.get(unit_id).copied()
    }

    pub fn get(&self, unit_id: &str) -> Option<&MunicipalityRecord> {
        self.position(unit_id).map(|i| &self.records[i])
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.unit_id.clone()).collect()
    }

    pub fn province_index(&self) -> &BTreeMap<String, Vec<String>> {
        &self.province_index
    }

    pub fn delta_factor(&self) -> f64 {
        self.delta_factor
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn column(&self, f: impl Fn(&MunicipalityRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }

    /// Attaches long-format population series. Units without a series keep `None`;
    /// series for unknown ids are reported and dropped.
    pub fn with_population(&self, mut series: BTreeMap<String, PopSeries>) -> (Dataset, Vec<String>) {
        let mut warnings = Vec::new();
        let mut records = self.records.clone();
        for r in &mut records {
            r.pop_series = series.remove(&r.unit_id);
        }
        for id in series.keys() {
            warnings.push(format!("population series for unknown unit `{id}` ignored"));
        }
        (Self::assemble(records, self.delta_factor), warnings)
    }
}

/// Renormalises nonnegative parts to sum to one.
pub fn closure_in_place(parts: &mut [f64]) {
    let s: f64 = parts.iter().sum();
    for x in parts.iter_mut() {
        *x /= s;
    }
}

pub fn closure(parts: &[f64]) -> Vec<f64> {
    let mut v = parts.to_vec();
    closure_in_place(&mut v);
    v
}

/// Per-part replacement values: `factor` times the smallest nonzero share observed in
/// each column. A column with no nonzero entry falls back to the global minimum.
pub fn column_deltas<const P: usize>(rows: &[[f64; P]], factor: f64) -> [f64; P] {
    let mut mins = [f64::INFINITY; P];
    for r in rows {
        for (m, x) in mins.iter_mut().zip(r) {
            if *x > 0.0 && *x < *m {
                *m = *x;
            }
        }
    }
    let global = mins.iter().cloned().fold(f64::INFINITY, f64::min);
    let global = if global.is_finite() { global } else { 1.0 / P as f64 };
    mins.map(|m| factor * if m.is_finite() { m } else { global })
}

/// Multiplicative zero replacement with per-part deltas on a closed composition:
/// zeros become `delta_j`, nonzero parts are scaled by `1 - sum of used deltas`.
pub fn replace_zeros_with(parts: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if parts.len() != deltas.len() {
        return Err(Error::LengthMismatch {
            expected: parts.len(),
            got: deltas.len(),
        });
    }
    let total: f64 = parts.iter().sum();
    if !(total > 0.0) || parts.iter().any(|x| *x < 0.0) {
        return Err(Error::domain("composition has no positive part"));
    }
    let used: f64 = parts
        .iter()
        .zip(deltas)
        .filter(|(x, _)| **x == 0.0)
        .map(|(_, d)| *d)
        .sum();
    if used == 0.0 {
        return Ok(parts.iter().map(|x| x / total).collect());
    }
    if used >= 1.0 {
        return Err(Error::domain("replacement deltas exhaust the unit simplex"));
    }
    let scale = (1.0 - used) / total;
    Ok(parts
        .iter()
        .zip(deltas)
        .map(|(x, d)| if *x == 0.0 { *d } else { x * scale })
        .collect())
}

/// Multiplicative replacement with one delta for every zero part.
pub fn replace_zeros(parts: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    replace_zeros_with(parts, &vec![delta; parts.len()])
}

fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    let commas = header.matches(',').count();
    let semis = header.matches(';').count();
    if semis > commas {
        b';'
    } else {
        b','
    }
}

fn row_err(line: u64, message: impl Into<String>) -> Error {
    Error::Row {
        line,
        message: message.into(),
    }
}

/// Parses the indicator table (comma or semicolon delimited, header row required).
pub fn parse_indicators(text: &str, map: &ColumnMap) -> Result<Vec<RawRecord>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 18];
    for (slot, field) in cols.iter_mut().zip(FIELDS) {
        let name = map.header(field);
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                field: field.to_string(),
                column: name.to_string(),
            })?;
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let cell = |k: usize| -> Result<&str> {
            let v = rec.get(cols[k]).unwrap_or("");
            if v.is_empty() {
                Err(row_err(line, format!("missing value for `{}`", FIELDS[k])))
            } else {
                Ok(v)
            }
        };
        let num = |k: usize| -> Result<f64> {
            let v = cell(k)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| row_err(line, format!("non-numeric value `{v}` for `{}`", FIELDS[k])))
        };
        let pop_cell = cell(8)?;
        let pop = pop_cell
            .parse::<u64>()
            .map_err(|_| row_err(line, format!("invalid population `{pop_cell}`")))?;
        let mut shares = [0.0; 9];
        for (j, s) in shares.iter_mut().enumerate() {
            *s = num(FIRST_SHARE_FIELD + j)?;
            if *s < 0.0 {
                return Err(row_err(line, format!("negative share for `{}`", FIELDS[FIRST_SHARE_FIELD + j])));
            }
        }
        if shares.iter().sum::<f64>() <= 0.0 {
            return Err(row_err(line, "all-zero building composition"));
        }
        out.push(RawRecord {
            unit_id: cell(0)?.to_string(),
            name: cell(1)?.to_string(),
            province_id: cell(2)?.to_string(),
            region_id: cell(3)?.to_string(),
            ag_max: num(4)?,
            ivsm: num(5)?,
            var_perc: num(6)?,
            eta_q3: num(7)?,
            pop,
            building_shares: shares,
            pop_series: None,
        });
    }
    let mut seen: HashMap<&str, ()> = HashMap::with_capacity(out.len());
    for r in &out {
        if seen.insert(r.unit_id.as_str(), ()).is_some() {
            return Err(Error::DuplicateUnit(r.unit_id.clone()));
        }
    }
    Ok(out)
}

/// Parses the indicator table into a dataset; population series are attached separately.
pub fn parse_dataset(text: &str, map: &ColumnMap, delta_factor: f64) -> Result<Dataset> {
    Dataset::from_raw(parse_indicators(text, map)?, delta_factor)
}

/// Parses a long-format population file with columns `unit_id, year, population`.
pub fn parse_population(text: &str) -> Result<BTreeMap<String, PopSeries>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
            field: name.to_string(),
            column: name.to_string(),
        })
    };
    let (ci, cy, cp) = (col("unit_id")?, col("year")?, col("population")?);
    let mut raw: BTreeMap<String, BTreeMap<i32, u64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec.get(ci).unwrap_or("");
        if id.is_empty() {
            return Err(row_err(line, "missing unit_id"));
        }
        let year: i32 = rec
            .get(cy)
            .unwrap_or("")
            .parse()
            .map_err(|_| row_err(line, "invalid year"))?;
        let population: u64 = rec
            .get(cp)
            .unwrap_or("")
            .parse()
            .map_err(|_| row_err(line, "invalid population"))?;
        if raw.entry(id.to_string()).or_default().insert(year, population).is_some() {
            return Err(row_err(line, format!("duplicate year {year} for unit `{id}`")));
        }
    }
    Ok(raw
        .into_iter()
        .map(|(id, m)| {
            let (years, counts) = m.into_iter().unzip();
            (id, PopSeries { years, counts })
        })
        .collect())
}

/// Writes the indicator table in canonical column order; `parse_dataset` reads it back
/// to an equal dataset.
pub fn write_indicators<W: Write>(ds: &Dataset, map: &ColumnMap, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(map.headers_in_order())?;
    for r in ds.records() {
        let r = r.raw();
        let mut row = vec![
            r.unit_id,
            r.name,
            r.province_id,
            r.region_id,
            r.ag_max.to_string(),
            r.ivsm.to_string(),
            r.var_perc.to_string(),
            r.eta_q3.to_string(),
            r.pop.to_string(),
        ];
        row.extend(r.building_shares.iter().map(|x| x.to_string()));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_population<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["unit_id", "year", "population"])?;
    for r in ds.records() {
        if let Some(s) = &r.pop_series {
            for (y, c) in s.years.iter().zip(&s.counts) {
                wr.write_record([r.unit_id.as_str(), &y.to_string(), &c.to_string()])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    IvsmOutOfRange,
    NegativeAgMax,
    ZeroComposition,
    MissingPopSeries,
    PopSeriesLength,
    NonPositivePopulation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub unit_id: String,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn count(&self, kind: IssueKind) -> usize {
        self.issues.iter().filter(|i| i.kind == kind).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in &self.issues {
            let _ = writeln!(s, "{}\t{}", i.unit_id, i.message);
        }
        s
    }
}

/// Range and completeness checks; never mutates the dataset.
pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |r: &MunicipalityRecord, kind, message: String| {
        issues.push(Issue {
            unit_id: r.unit_id.clone(),
            kind,
            message,
        })
    };
    for r in ds.records() {
        if !(r.ivsm > 70.0 && r.ivsm < 130.0) {
            push(r, IssueKind::IvsmOutOfRange, format!("ivsm out of (70,130): {}", r.ivsm));
        }
        if r.ag_max < 0.0 {
            push(r, IssueKind::NegativeAgMax, format!("negative ag_max: {}", r.ag_max));
        }
        if r.replaced_zeros > 0 {
            push(
                r,
                IssueKind::ZeroComposition,
                format!("{} zero building share(s) replaced", r.replaced_zeros),
            );
        }
        match &r.pop_series {
            None => push(r, IssueKind::MissingPopSeries, "missing pop_series".into()),
            Some(s) => {
                if !s.is_complete() {
                    push(
                        r,
                        IssueKind::PopSeriesLength,
                        format!(
                            "pop_series must cover {POP_FIRST_YEAR}-{POP_LAST_YEAR} ({POP_YEARS} entries), got {}",
                            s.years.len()
                        ),
                    );
                }
                if s.counts.contains(&0) {
                    push(r, IssueKind::NonPositivePopulation, "pop_series contains zero population".into());
                }
            }
        }
    }
    ValidationReport { issues }
}
