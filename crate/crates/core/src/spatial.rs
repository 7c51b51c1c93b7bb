//! Contiguity weights, polygon adjacency and spatial lags.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::Dataset;

/// Row-standardised contiguity weights: `w_ij = 1 / n_i` for each of the `n_i`
/// neighbours of unit i. Units without neighbours are flagged as islands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialWeights {
    unit_ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    island_flags: Vec<bool>,
}

impl SpatialWeights {
    /// Builds weights over `unit_ids` from unordered id pairs. Duplicate pairs collapse.
    pub fn from_pairs(unit_ids: &[String], pairs: &[(String, String)]) -> Result<Self> {
        let index: HashMap<&str, usize> = unit_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if index.len() != unit_ids.len() {
            return Err(Error::invalid("unit ids must be unique"));
        }
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); unit_ids.len()];
        for (a, b) in pairs {
            let lookup = |id: &String| {
                index.get(id.as_str()).copied().ok_or_else(|| Error::UnknownUnit {
                    id: id.clone(),
                    a: a.clone(),
                    b: b.clone(),
                })
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            if ia == ib {
                return Err(Error::SelfLoop(a.clone()));
            }
            sets[ia].insert(ib);
            sets[ib].insert(ia);
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let weights = neighbors
            .iter()
            .map(|nb| vec![1.0 / nb.len() as f64; nb.len()])
            .collect();
        let island_flags = neighbors.iter().map(|nb| nb.is_empty()).collect();
        Ok(SpatialWeights {
            unit_ids: unit_ids.to_vec(),
            neighbors,
            weights,
            island_flags,
        })
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    pub fn is_island(&self, i: usize) -> bool {
        self.island_flags[i]
    }

    pub fn island_flags(&self) -> &[bool] {
        &self.island_flags
    }

    pub fn island_count(&self) -> usize {
        self.island_flags.iter().filter(|f| **f).count()
    }

    /// Indices of units with at least one neighbour.
    pub fn connected_units(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| !self.island_flags[*i]).collect()
    }

    pub fn total_links(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Weights over the dataset's units (in dataset order).
pub fn build_weights(ds: &Dataset, adjacency: &[(String, String)]) -> Result<SpatialWeights> {
    SpatialWeights::from_pairs(&ds.unit_ids(), adjacency)
}

/// `lag_i = sum_j w_ij field_j`; islands get `None`.
pub fn spatial_lag(w: &SpatialWeights, field: &[f64]) -> Result<Vec<Option<f64>>> {
    if field.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            got: field.len(),
        });
    }
    Ok((0..w.len())
        .map(|i| {
            if w.is_island(i) {
                None
            } else {
                Some(
                    w.neighbors[i]
                        .iter()
                        .zip(&w.weights[i])
                        .map(|(j, wij)| wij * field[*j])
                        .sum(),
                )
            }
        })
        .collect())
}

/// Reads a two-column `id_a,id_b` pair file (comma or semicolon); a header row
/// spelled `id_a,id_b` is skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let first = text.lines().next().unwrap_or("");
    let delim = if first.matches(';').count() > first.matches(',').count() { b';' } else { b',' };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != 2 {
            return Err(Error::Row {
                line,
                message: format!("expected two columns, found {}", rec.len()),
            });
        }
        let (a, b) = (rec[0].to_string(), rec[1].to_string());
        if k == 0 && a.eq_ignore_ascii_case("id_a") && b.eq_ignore_ascii_case("id_b") {
            continue;
        }
        out.push((a, b));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContiguityOptions {
    /// Coordinates closer than this (per axis) are treated as the same point.
    pub snap_tolerance: f64,
    /// Require a shared edge instead of a shared point.
    pub rook: bool,
}

impl Default for ContiguityOptions {
    fn default() -> Self {
        ContiguityOptions {
            snap_tolerance: 1e-8,
            rook: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Contiguity {
    /// Sorted pairs with `a < b`.
    pub pairs: Vec<(String, String)>,
    /// Ids of the features that were read successfully, sorted.
    pub feature_ids: Vec<String>,
    pub warnings: Vec<String>,
}

type Ring = Vec<(f64, f64)>;

fn feature_id(feature: &Value, id_property: &str) -> Option<String> {
    let prop = feature.get("properties").and_then(|p| p.get(id_property));
    let v = prop.or_else(|| feature.get("id"))?;
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_ring(v: &Value) -> Option<Ring> {
    let pts = v.as_array()?;
    let mut ring = Vec::with_capacity(pts.len());
    for p in pts {
        let c = p.as_array()?;
        let x = c.first()?.as_f64()?;
        let y = c.get(1)?.as_f64()?;
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        ring.push((x, y));
    }
    if ring.len() < 4 {
        return None;
    }
    Some(ring)
}

fn parse_polygon(v: &Value) -> Option<Vec<Ring>> {
    let rings = v.as_array()?;
    if rings.is_empty() {
        return None;
    }
    rings.iter().map(parse_ring).collect()
}

/// Rings of a Polygon or MultiPolygon geometry; `None` when the geometry is invalid.
fn geometry_rings(geom: &Value) -> Option<Vec<Ring>> {
    let coords = geom.get("coordinates")?;
    match geom.get("type")?.as_str()? {
        "Polygon" => parse_polygon(coords),
        "MultiPolygon" => {
            let polys = coords.as_array()?;
            if polys.is_empty() {
                return None;
            }
            let mut out = Vec::new();
            for p in polys {
                out.extend(parse_polygon(p)?);
            }
            Some(out)
        }
        _ => None,
    }
}

pub type FeatureRings = BTreeMap<String, Vec<Ring>>;

/// Reads the features of a GeoJSON feature collection as (id, rings), reporting
/// features that cannot be used.
pub fn read_features(geojson: &str, id_property: &str) -> Result<(FeatureRings, Vec<String>)> {
    let doc: Value = serde_json::from_str(geojson)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::invalid("geometry file is not a feature collection"))?;
    let mut out: BTreeMap<String, Vec<Ring>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (k, f) in features.iter().enumerate() {
        let Some(id) = feature_id(f, id_property) else {
            warnings.push(format!("feature {k}: no `{id_property}` property, skipped"));
            continue;
        };
        let Some(rings) = f.get("geometry").and_then(geometry_rings) else {
            warnings.push(format!("feature {k} ({id}): invalid or non-polygonal geometry, skipped"));
            continue;
        };
        let entry = out.entry(id.clone()).or_default();
        if !entry.is_empty() {
            warnings.push(format!("feature {k}: id `{id}` repeated, parts merged"));
        }
        entry.extend(rings);
    }
    Ok((out, warnings))
}

/// Adjacency pairs from polygon boundaries: queen (any shared point) by default,
/// rook (shared edge) on request. Points are matched after snapping to a grid of the
/// configured tolerance.
pub fn contiguity_from_polygons(geojson: &str, id_property: &str, opts: ContiguityOptions) -> Result<Contiguity> {
    if !(opts.snap_tolerance > 0.0) {
        return Err(Error::invalid("snap tolerance must be positive"));
    }
    let (features, warnings) = read_features(geojson, id_property)?;
    let ids: Vec<String> = features.keys().cloned().collect();
    let tol = opts.snap_tolerance;
    let snap = |(x, y): (f64, f64)| ((x / tol).round() as i64, (y / tol).round() as i64);
    let mut links: BTreeSet<(usize, usize)> = BTreeSet::new();
    if opts.rook {
        type Cell = (i64, i64);
        let mut edges: HashMap<(Cell, Cell), BTreeSet<usize>> = HashMap::new();
        for (f, rings) in features.values().enumerate() {
            for ring in rings {
                for w in ring.windows(2) {
                    let (a, b) = (snap(w[0]), snap(w[1]));
                    if a == b {
                        continue;
                    }
                    let key = if a < b { (a, b) } else { (b, a) };
                    edges.entry(key).or_default().insert(f);
                }
            }
        }
        for owners in edges.values() {
            add_clique(owners, &mut links);
        }
    } else {
        type Vertex = (usize, f64, f64);
        let mut cells: HashMap<(i64, i64), Vec<Vertex>> = HashMap::new();
        for (f, rings) in features.values().enumerate() {
            for ring in rings {
                for &(x, y) in ring {
                    cells.entry(snap((x, y))).or_default().push((f, x, y));
                }
            }
        }
        for (&(cx, cy), pts) in &cells {
            for &(f, x, y) in pts {
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        let Some(other) = cells.get(&(cx + dx, cy + dy)) else { continue };
                        for &(g, ox, oy) in other {
                            if g != f && (x - ox).abs() <= tol && (y - oy).abs() <= tol {
                                links.insert((f.min(g), f.max(g)));
                            }
                        }
                    }
                }
            }
        }
    }
    let pairs = links
        .into_iter()
        .map(|(a, b)| (ids[a].clone(), ids[b].clone()))
        .collect();
    Ok(Contiguity {
        pairs,
        feature_ids: ids,
        warnings,
    })
}

fn add_clique(owners: &BTreeSet<usize>, links: &mut BTreeSet<(usize, usize)>) {
    let v: Vec<usize> = owners.iter().copied().collect();
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            links.insert((v[i], v[j]));
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IdMatchReport {
    /// Dataset units with no geometry.
    pub missing_geometry: Vec<String>,
    /// Geometry features with no dataset record.
    pub unknown_features: Vec<String>,
}

pub fn match_ids(feature_ids: &[String], ds: &Dataset) -> IdMatchReport {
    let feats: BTreeSet<&str> = feature_ids.iter().map(String::as_str).collect();
    IdMatchReport {
        missing_geometry: ds
            .records()
            .iter()
            .filter(|r| !feats.contains(r.unit_id.as_str()))
            .map(|r| r.unit_id.clone())
            .collect(),
        unknown_features: feature_ids
            .iter()
            .filter(|id| ds.position(id).is_none())
            .cloned()
            .collect(),
    }
}

/// Drops pairs that mention units absent from the dataset.
pub fn restrict_pairs(pairs: &[(String, String)], ds: &Dataset) -> Vec<(String, String)> {
    pairs
        .iter()
        .filter(|(a, b)| ds.position(a).is_some() && ds.position(b).is_some())
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn path_weights_and_island() {
        let w = SpatialWeights::from_pairs(&ids(&["A", "B", "C", "D"]), &[pair("A", "B"), pair("B", "C")]).unwrap();
        assert_eq!(w.neighbors(1), &[0, 2]);
        assert_eq!(w.weights(1), &[0.5, 0.5]);
        assert_eq!(w.weights(0), &[1.0]);
        assert!(w.is_island(3));
        assert!(!w.is_island(1));
        let lag = spatial_lag(&w, &[0.0, 5.0, 2.0, 9.0]).unwrap();
        assert_eq!(lag[1], Some(1.0));
        assert_eq!(lag[3], None);
    }

    #[test]
    fn unknown_id_and_self_loop() {
        let u = ids(&["A", "B"]);
        match SpatialWeights::from_pairs(&u, &[pair("A", "Z")]) {
            Err(Error::UnknownUnit { id, .. }) => assert_eq!(id, "Z"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(SpatialWeights::from_pairs(&u, &[pair("A", "A")]), Err(Error::SelfLoop(_))));
    }

    #[test]
    fn lag_length_mismatch() {
        let w = SpatialWeights::from_pairs(&ids(&["A", "B"]), &[pair("A", "B")]).unwrap();
        assert!(matches!(spatial_lag(&w, &[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn pair_file_parsing() {
        let p = parse_pairs("id_a,id_b\nA,B\nB;C\n").err();
        assert!(p.is_some(), "mixed delimiters are a row error");
        let p = parse_pairs("id_a,id_b\nA,B\nB,C\n").unwrap();
        assert_eq!(p, vec![pair("A", "B"), pair("B", "C")]);
        let p = parse_pairs("A;B\n").unwrap();
        assert_eq!(p, vec![pair("A", "B")]);
    }

    fn square(id: &str, x0: f64, y0: f64) -> String {
        format!(
            r#"{{"type":"Feature","properties":{{"code":"{id}"}},"geometry":{{"type":"Polygon","coordinates":[[[{x0},{y0}],[{x1},{y0}],[{x1},{y1}],[{x0},{y1}],[{x0},{y0}]]]}}}}"#,
            x1 = x0 + 1.0,
            y1 = y0 + 1.0
        )
    }

    fn collection(features: &[String]) -> String {
        format!(r#"{{"type":"FeatureCollection","features":[{}]}}"#, features.join(","))
    }

    #[test]
    fn squares_sharing_an_edge() {
        let g = collection(&[square("A", 0.0, 0.0), square("B", 1.0, 0.0)]);
        for rook in [false, true] {
            let c = contiguity_from_polygons(&g, "code", ContiguityOptions { rook, ..Default::default() }).unwrap();
            assert_eq!(c.pairs, vec![pair("A", "B")]);
        }
    }

    #[test]
    fn corner_contact_is_queen_only() {
        let g = collection(&[square("A", 0.0, 0.0), square("B", 1.0, 1.0)]);
        let c = contiguity_from_polygons(&g, "code", ContiguityOptions::default()).unwrap();
        assert_eq!(c.pairs, vec![pair("A", "B")]);
        let c = contiguity_from_polygons(&g, "code", ContiguityOptions { rook: true, ..Default::default() }).unwrap();
        assert!(c.pairs.is_empty());
    }

    #[test]
    fn separated_squares_have_no_pair() {
        let g = collection(&[square("A", 0.0, 0.0), square("B", 2.0, 0.0)]);
        let c = contiguity_from_polygons(&g, "code", ContiguityOptions::default()).unwrap();
        assert!(c.pairs.is_empty());
        assert_eq!(c.feature_ids, ids(&["A", "B"]));
    }

    #[test]
    fn near_coincident_vertices_snap() {
        let g = collection(&[square("A", 0.0, 0.0), square("B", 1.0 + 5e-9, 0.0)]);
        let c = contiguity_from_polygons(&g, "code", ContiguityOptions::default()).unwrap();
        assert_eq!(c.pairs, vec![pair("A", "B")]);
    }

    #[test]
    fn invalid_features_are_skipped_with_warnings() {
        let bad = r#"{"type":"Feature","properties":{"code":"X"},"geometry":{"type":"Point","coordinates":[0,0]}}"#;
        let noid = r#"{"type":"Feature","properties":{},"geometry":null}"#;
        let g = collection(&[square("A", 0.0, 0.0), bad.to_string(), noid.to_string()]);
        let c = contiguity_from_polygons(&g, "code", ContiguityOptions::default()).unwrap();
        assert_eq!(c.feature_ids, ids(&["A"]));
        assert_eq!(c.warnings.len(), 2);
    }

    #[test]
    fn feature_order_does_not_matter() {
        let fs = vec![
            square("A", 0.0, 0.0),
            square("B", 1.0, 0.0),
            square("C", 0.0, 1.0),
            square("D", 3.0, 3.0),
        ];
        let mut rev = fs.clone();
        rev.reverse();
        let a = contiguity_from_polygons(&collection(&fs), "code", ContiguityOptions::default()).unwrap();
        let b = contiguity_from_polygons(&collection(&rev), "code", ContiguityOptions::default()).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.pairs.len(), 3);
    }
}
