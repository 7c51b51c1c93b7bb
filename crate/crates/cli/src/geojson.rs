//! Joins result tables onto the features of a GeoJSON file.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{Map, Value};

#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: HashMap<String, Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("bad table path {}", path.display()))?
            .to_string();
        let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let id_col = header
            .iter()
            .position(|h| h == "unit_id")
            .ok_or_else(|| anyhow!("{} has no unit_id column", path.display()))?;
        let mut rows = HashMap::new();
        for rec in rd.records() {
            let rec = rec?;
            let cells: Vec<String> = rec.iter().map(str::to_string).collect();
            rows.insert(cells[id_col].clone(), cells);
        }
        Ok(Table { name, header, rows })
    }
}

fn cell_value(s: &str) -> Value {
    if s.is_empty() {
        return Value::Null;
    }
    match s {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Value::from(x),
        _ => Value::String(s.to_string()),
    }
}

/// Feature collection with one feature per matched unit, properties being the id
/// plus `table.column` values. Returns the document and warnings about unmatched ids.
pub fn join_features(geojson: &str, id_property: &str, tables: &[Table]) -> Result<(String, Vec<String>)> {
    if tables.is_empty() {
        bail!("no result tables to join");
    }
    let doc: Value = serde_json::from_str(geojson)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| anyhow!("geometry file is not a feature collection"))?;
    let mut result_ids: BTreeSet<&str> = BTreeSet::new();
    for t in tables {
        result_ids.extend(t.rows.keys().map(String::as_str));
    }
    let mut out = Vec::new();
    let mut matched: BTreeSet<String> = BTreeSet::new();
    let mut unmatched_features = Vec::new();
    for f in features {
        let id = f
            .get("properties")
            .and_then(|p| p.get(id_property))
            .or_else(|| f.get("id"))
            .and_then(|v| match v {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            });
        let Some(id) = id else {
            unmatched_features.push("<no id>".to_string());
            continue;
        };
        if !result_ids.contains(id.as_str()) {
            unmatched_features.push(id);
            continue;
        }
        let mut props = Map::new();
        props.insert(id_property.to_string(), Value::String(id.clone()));
        for t in tables {
            let Some(row) = t.rows.get(&id) else { continue };
            for (h, v) in t.header.iter().zip(row) {
                if h != "unit_id" {
                    props.insert(format!("{}.{h}", t.name), cell_value(v));
                }
            }
        }
        let mut feat = Map::new();
        feat.insert("type".into(), Value::String("Feature".into()));
        feat.insert("properties".into(), Value::Object(props));
        feat.insert("geometry".into(), f.get("geometry").cloned().unwrap_or(Value::Null));
        out.push(Value::Object(feat));
        matched.insert(id);
    }
    if out.is_empty() {
        bail!("no geometry feature matches any result unit id");
    }
    let mut warnings = Vec::new();
    if !unmatched_features.is_empty() {
        warnings.push(format!(
            "{} feature(s) without results: {}",
            unmatched_features.len(),
            unmatched_features.join(", ")
        ));
    }
    let missing: Vec<&str> = result_ids
        .iter()
        .filter(|id| !matched.contains(**id))
        .copied()
        .collect();
    if !missing.is_empty() {
        warnings.push(format!("{} unit(s) without geometry: {}", missing.len(), missing.join(", ")));
    }
    let mut fc = Map::new();
    fc.insert("type".into(), Value::String("FeatureCollection".into()));
    fc.insert("features".into(), Value::Array(out));
    Ok((serde_json::to_string(&Value::Object(fc))?, warnings))
}
