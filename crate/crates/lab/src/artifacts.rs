//! On-disk artifact formats: CSV with `.` decimals and `\n` line endings,
//! JSON sidecars, atomic writes (temp + rename), and provenance stamps.
//!
//! Everything written here is byte-reproducible from (config, seed): float
//! formatting is shortest-roundtrip and no timestamps are recorded.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use meanfield_core::free_energy::{FixedPointSolution, RegularizationParams};
use meanfield_core::measures::{GridMeasure, GridSpec};
use meanfield_core::numeric::fnv1a64;

/// Shortest-roundtrip float formatting (`{:?}` switches to exponent
/// notation only when shorter, and round-trips exactly).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Write atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().context("artifact path needs a parent directory")?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("tmp")
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Provenance stamp: crate version + config hash + seed, no wall clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config_json: &str, seed: u64) -> Self {
        Self {
            tool: "meanfield-lab".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: format!("{:016x}", fnv1a64(config_json.as_bytes())),
            seed,
        }
    }
}

/// Sidecar metadata of a grid-measure CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMeta {
    pub dim: usize,
    pub h: f64,
    pub l: f64,
    pub normalized: bool,
}

/// `node,density` CSV plus a JSON sidecar `{dim, h, L, normalized}`.
pub fn write_grid_measure(path_csv: &Path, mu: &GridMeasure) -> Result<()> {
    let mut out = String::new();
    match mu.dim() {
        1 => {
            out.push_str("node,density\n");
            for i in 0..mu.len() {
                out.push_str(&fmt_f64(mu.node(i)));
                out.push(',');
                out.push_str(&fmt_f64(mu.density_at(i)));
                out.push('\n');
            }
        }
        _ => {
            out.push_str("node_x,node_y,density\n");
            let n = mu.spec().n;
            for ix in 0..n {
                for iy in 0..n {
                    out.push_str(&fmt_f64(mu.spec().node(ix)));
                    out.push(',');
                    out.push_str(&fmt_f64(mu.spec().node(iy)));
                    out.push(',');
                    out.push_str(&fmt_f64(mu.density_at(ix * n + iy)));
                    out.push('\n');
                }
            }
        }
    }
    write_atomic(path_csv, out.as_bytes())?;
    let meta = GridMeta {
        dim: mu.dim(),
        h: mu.spacing(),
        l: mu.spec().l,
        normalized: mu.is_normalized(),
    };
    write_json(&path_csv.with_extension("meta.json"), &meta)
}

/// Load a 1D grid-measure CSV written by [`write_grid_measure`].
pub fn load_grid_measure_1d(path_csv: &Path) -> Result<GridMeasure> {
    let text = fs::read_to_string(path_csv)
        .with_context(|| format!("reading {}", path_csv.display()))?;
    let mut nodes = Vec::new();
    let mut density = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "node,density" {
                bail!("unexpected header {line:?} in {}", path_csv.display());
            }
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .with_context(|| format!("malformed row {lineno} in {}", path_csv.display()))?;
        nodes.push(a.parse::<f64>()?);
        density.push(b.parse::<f64>()?);
    }
    if nodes.len() < 4 {
        bail!("grid CSV too short");
    }
    let l = -nodes[0];
    let spec = GridSpec::new(l, nodes.len());
    let mut mu = GridMeasure::from_values_1d(spec, density);
    mu.normalize();
    Ok(mu)
}

/// JSON summary of a fixed-point solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionMeta {
    pub beta: f64,
    pub tau: f64,
    pub log_z: f64,
    pub residual: f64,
    pub iterations: usize,
}

pub fn write_solution(dir: &Path, sol: &FixedPointSolution) -> Result<()> {
    write_grid_measure(&dir.join("mu_star.csv"), &sol.mu_star)?;
    let meta = SolutionMeta {
        beta: sol.params.beta,
        tau: sol.params.tau,
        log_z: sol.log_z,
        residual: sol.residual,
        iterations: sol.iterations,
    };
    write_json(&dir.join("solution.json"), &meta)?;
    // continuation trace as CSV
    let mut trace = String::from("beta,residual\n");
    for &(b, r) in &sol.trace {
        trace.push_str(&fmt_f64(b));
        trace.push(',');
        trace.push_str(&fmt_f64(r));
        trace.push('\n');
    }
    write_atomic(&dir.join("continuation_trace.csv"), trace.as_bytes())
}

/// Load a solve directory back into a [`FixedPointSolution`].
pub fn load_solution(dir: &Path) -> Result<FixedPointSolution> {
    let csv = dir.join("mu_star.csv");
    if !csv.exists() {
        bail!(
            "missing solve artifacts in {}: run the `solve` subcommand first",
            dir.display()
        );
    }
    let mu_star = load_grid_measure_1d(&csv)?;
    let meta: SolutionMeta =
        serde_json::from_str(&fs::read_to_string(dir.join("solution.json"))?)?;
    let params = RegularizationParams::new(meta.beta, meta.tau)
        .map_err(|e| anyhow::anyhow!("stored params invalid: {e}"))?;
    Ok(FixedPointSolution {
        mu_star,
        log_z: meta.log_z,
        residual: meta.residual,
        iterations: meta.iterations,
        trace: vec![],
        params,
    })
}

/// A simple long-format CSV builder with fixed column order.
pub struct CsvBuilder {
    text: String,
    columns: usize,
}

impl CsvBuilder {
    pub fn new(header: &str) -> Self {
        let columns = header.split(',').count();
        let mut text = String::from(header);
        text.push('\n');
        Self { text, columns }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "CSV row arity mismatch");
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn row_f64(&mut self, fields: &[f64]) {
        let fields: Vec<String> = fields.iter().map(|&x| fmt_f64(x)).collect();
        self.row(&fields);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// Output root resolution: env var beats the flag, the flag beats config.
pub fn resolve_output_dir(cli_out: Option<&Path>, config_out: &str) -> PathBuf {
    if let Ok(env_out) = std::env::var("MEANFIELD_LAB_OUT") {
        if !env_out.is_empty() {
            return PathBuf::from(env_out);
        }
    }
    cli_out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(config_out))
}
