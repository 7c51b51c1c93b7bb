#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geovuln_core::ingest::{write_indicators, write_population, ColumnMap};
use geovuln_core::synth::{generate, lattice_geojson, SynthConfig};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

/// Writes a synthetic lattice (indicators, population, adjacency, geometry) and a
/// config referencing it with relative paths.
pub fn fixture(rows: usize, cols: usize, extra: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig { rows, cols, ..Default::default() }).unwrap();
    let root = dir.path();
    let mut buf = Vec::new();
    write_indicators(&data.dataset, &ColumnMap::default(), &mut buf).unwrap();
    std::fs::write(root.join("indicators.csv"), &buf).unwrap();
    buf.clear();
    write_population(&data.dataset, &mut buf).unwrap();
    std::fs::write(root.join("population.csv"), &buf).unwrap();
    let mut pairs = String::from("id_a,id_b\n");
    for (a, b) in &data.pairs {
        pairs.push_str(&format!("{a},{b}\n"));
    }
    std::fs::write(root.join("adjacency.csv"), pairs).unwrap();
    std::fs::write(root.join("grid.geojson"), lattice_geojson(rows, cols)).unwrap();
    let config = root.join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "indicators = indicators.csv\npopulation = population.csv\nadjacency = adjacency.csv\n\
             geometry = grid.geojson\nlisa_permutations = 199\npermanova_permutations = 199\n{extra}"
        ),
    )
    .unwrap();
    Fixture { dir, config }
}

pub fn geovuln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geovuln"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = geovuln(args);
    assert!(
        out.status.success(),
        "geovuln {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

pub type Artifacts = Vec<(String, Vec<u8>)>;

/// Non-manifest files of a directory with their bytes, sorted by name.
pub fn artifacts(dir: &Path) -> Artifacts {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_str().unwrap().ends_with(".manifest.json"))
        .map(|p| (p.file_name().unwrap().to_str().unwrap().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}
