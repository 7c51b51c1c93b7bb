//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use geovuln_core::coda::PcaScaling;
use geovuln_core::ingest::{ColumnMap, FIELDS};
use geovuln_core::stats::QuantileType;

/// Every recognised key with its default; an empty default means unset.
pub const KEYS: &[(&str, &str)] = [
    ("indicators", ""),
    ("adjacency", ""),
    ("geometry", ""),
    ("geometry_id_property", "id"),
    ("population", ""),
    ("out", "out"),
    ("seed", "42"),
    ("threads", ""),
    ("lisa_fields", "ivsm,var_perc,eta_q3"),
    ("lisa_permutations", "999"),
    ("permanova_permutations", "999"),
    ("alpha", "0.05"),
    ("quantile_type", "7"),
    ("rook", "false"),
    ("snap_tolerance", "1e-8"),
    ("classes", "9"),
    ("pca_scaling", "covariance"),
    ("zero_delta_factor", "0.65"),
    ("grid_size", "1000"),
    ("bandwidth", "0.527"),
    ("k", "4"),
    ("on_smoothed", "false"),
]
.as_slice();

const PATH_KEYS: [&str; 5] = ["indicators", "adjacency", "geometry", "population", "out"];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    /// Values exactly as written in the file or on the command line.
    values: BTreeMap<String, String>,
    /// Directory against which relative paths from the file are resolved.
    resolved_paths: BTreeMap<String, PathBuf>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
        || key
            .strip_prefix("column.")
            .is_some_and(|f| FIELDS.contains(&f))
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", n + 1))?;
            cfg.set_from(k.trim(), v.trim(), base)
                .with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn set_from(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        if !known(key) {
            bail!("unknown configuration key `{key}`");
        }
        if PATH_KEYS.contains(&key) {
            self.resolved_paths.insert(key.to_string(), base.join(value));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Command-line override; relative paths stay relative to the working directory.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        self.set_from(key, &value.into(), Path::new(""))
    }

    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{pair}`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d))
            .filter(|v| !v.is_empty())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key)?;
        Some(
            self.resolved_paths
                .get(key)
                .cloned()
                .unwrap_or_else(|| PathBuf::from(self.raw(key).unwrap_or_default())),
        )
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key).ok_or_else(|| anyhow!("`{key}` is not set"))?;
        v.parse::<T>()
            .map_err(|e| anyhow!("invalid value `{v}` for `{key}`: {e}"))
    }

    /// Effective configuration, defaults included, for the run manifest.
    pub fn effective(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, d)| (k.to_string(), d.to_string()))
            .collect();
        for (k, v) in &self.values {
            out.insert(k.clone(), v.clone());
        }
        out
    }

    pub fn settings(&self) -> Result<Settings> {
        let mut column_map = ColumnMap::default();
        for (k, v) in &self.values {
            if let Some(field) = k.strip_prefix("column.") {
                column_map.set(field, v.clone())?;
            }
        }
        let classes: usize = self.parsed("classes")?;
        if classes != 9 && classes != 3 {
            bail!("classes must be 9 or 3, got {classes}");
        }
        let pca_scaling = match self.raw("pca_scaling") {
            Some("covariance") => PcaScaling::Covariance,
            Some("correlation") => PcaScaling::Correlation,
            other => bail!("pca_scaling must be covariance or correlation, got {other:?}"),
        };
        let lisa_fields: Vec<String> = self
            .raw("lisa_fields")
            .unwrap_or_default()
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        for f in &lisa_fields {
            if !LISA_FIELDS.contains(&f.as_str()) {
                bail!("unknown LISA field `{f}` (expected one of {})", LISA_FIELDS.join(", "));
            }
        }
        let threads = match self.raw("threads") {
            Some(_) => Some(self.parsed::<usize>("threads")?),
            None => None,
        };
        Ok(Settings {
            indicators: self.path("indicators"),
            adjacency: self.path("adjacency"),
            geometry: self.path("geometry"),
            geometry_id_property: self.raw("geometry_id_property").unwrap_or("id").to_string(),
            population: self.path("population"),
            out: self.path("out").unwrap_or_else(|| PathBuf::from("out")),
            seed: self.parsed("seed")?,
            threads,
            lisa_fields,
            lisa_permutations: self.parsed("lisa_permutations")?,
            permanova_permutations: self.parsed("permanova_permutations")?,
            alpha: self.parsed("alpha")?,
            quantile_type: QuantileType::new(self.parsed("quantile_type")?)?,
            rook: self.parsed("rook")?,
            snap_tolerance: self.parsed("snap_tolerance")?,
            classes,
            pca_scaling,
            zero_delta_factor: self.parsed("zero_delta_factor")?,
            grid_size: self.parsed("grid_size")?,
            bandwidth: self.parsed("bandwidth")?,
            k: self.parsed("k")?,
            on_smoothed: self.parsed("on_smoothed")?,
            column_map,
        })
    }
}

pub const LISA_FIELDS: [&str; 4] = ["ivsm", "var_perc", "eta_q3", "pc1"];

#[derive(Debug, Clone)]
pub struct Settings {
    pub indicators: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub geometry: Option<PathBuf>,
    pub geometry_id_property: String,
    pub population: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub lisa_fields: Vec<String>,
    pub lisa_permutations: usize,
    pub permanova_permutations: usize,
    pub alpha: f64,
    pub quantile_type: QuantileType,
    pub rook: bool,
    pub snap_tolerance: f64,
    pub classes: usize,
    pub pca_scaling: PcaScaling,
    pub zero_delta_factor: f64,
    pub grid_size: usize,
    pub bandwidth: f64,
    pub k: usize,
    pub on_smoothed: bool,
    pub column_map: ColumnMap,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_defaults() {
        let text = "# run\nindicators = data/ind.csv\nseed=7\ncolumn.ivsm = IVSM\n\nk = 3\n";
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        let s = cfg.settings().unwrap();
        assert_eq!(s.indicators.unwrap(), PathBuf::from("/base/data/ind.csv"));
        assert_eq!(s.seed, 7);
        assert_eq!(s.k, 3);
        assert_eq!(s.lisa_permutations, 999);
        assert_eq!(s.column_map.header("ivsm"), "IVSM");
        assert!(s.adjacency.is_none());
        let eff = cfg.effective();
        assert_eq!(eff["indicators"], "data/ind.csv");
        assert_eq!(eff["alpha"], "0.05");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("colour = red", Path::new(".")).is_err());
        assert!(RunConfig::parse("seed 4", Path::new(".")).is_err());
        assert!(RunConfig::parse("column.nope = x", Path::new(".")).is_err());
        let cfg = RunConfig::parse("classes = 5", Path::new(".")).unwrap();
        assert!(cfg.settings().is_err());
        let cfg = RunConfig::parse("lisa_fields = ivsm,foo", Path::new(".")).unwrap();
        assert!(cfg.settings().is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse("seed = 1", Path::new(".")).unwrap();
        cfg.set("seed", "9").unwrap();
        cfg.set_pair("alpha=0.1").unwrap();
        let s = cfg.settings().unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.alpha, 0.1);
        assert!(cfg.set_pair("alpha").is_err());
    }
}
