//! Artifact files: CSV matrices, JSON records, gnuplot line cuts and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cco_core::density::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Format, OutputSection};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_path: Option<String>,
    /// Hash of the configuration file as read.
    pub config_sha256: Option<String>,
    /// Hash of the configuration after overrides, as JSON.
    pub effective_config_sha256: Option<String>,
    pub rng_seeds: Vec<u64>,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<OutputRecord>,
}

/// Matrix on an `(E, E′)` grid as stored in CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMatrix {
    pub e_values: Vec<f64>,
    pub e_prime_values: Vec<f64>,
    pub values: Matrix,
}

const CORNER: &str = "E\\E'";

pub fn matrix_csv(e: &[f64], e_prime: &[f64], m: &Matrix) -> String {
    let mut s = String::with_capacity(20 * (e.len() + 1) * (e_prime.len() + 1));
    s.push_str(CORNER);
    for v in e_prime {
        let _ = write!(s, ",{v:.12e}");
    }
    s.push('\n');
    for (i, v) in e.iter().enumerate() {
        let _ = write!(s, "{v:.12e}");
        for j in 0..e_prime.len() {
            let _ = write!(s, ",{:.12e}", m[(i, j)]);
        }
        s.push('\n');
    }
    s
}

pub fn parse_matrix_csv(text: &str) -> anyhow::Result<GridMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().context("empty file")?;
    let mut cols = header.split(',');
    if cols.next().map(str::trim) != Some(CORNER) {
        bail!("header must start with {CORNER}");
    }
    let e_prime_values = cols
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .context("header")?;
    let mut e_values = Vec::new();
    let mut data = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("row {}", n + 1))?;
        if row.len() != e_prime_values.len() + 1 {
            bail!("row {} has {} columns, expected {}", n + 1, row.len(), e_prime_values.len() + 1);
        }
        e_values.push(row[0]);
        data.extend_from_slice(&row[1..]);
    }
    let values = Matrix::from_row_slice(e_values.len(), e_prime_values.len(), &data);
    Ok(GridMatrix {
        e_values,
        e_prime_values,
        values,
    })
}

/// Writes artifacts into one directory and records their checksums.
pub struct Artifacts {
    dir: PathBuf,
    output: OutputSection,
    records: Vec<OutputRecord>,
}

impl Artifacts {
    pub fn new(output: &OutputSection) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&output.directory)
            .with_context(|| format!("creating {}", output.directory.display()))?;
        Ok(Self {
            dir: output.directory.clone(),
            output: output.clone(),
            records: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records(&self) -> &[OutputRecord] {
        &self.records
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.records.retain(|r| r.path != name);
        self.records.push(OutputRecord {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// `<name>.csv` with no line cuts.
    pub fn table(&mut self, name: &str, rows: &[f64], cols: &[f64], m: &Matrix) -> anyhow::Result<()> {
        if self.output.wants(Format::Csv) {
            self.write(&format!("{name}.csv"), matrix_csv(rows, cols, m).as_bytes())?;
        }
        Ok(())
    }

    /// `<name>.csv`, plus one gnuplot table per configured cut.
    pub fn matrix(&mut self, name: &str, e: &[f64], e_prime: &[f64], m: &Matrix) -> anyhow::Result<()> {
        if self.output.wants(Format::Csv) {
            self.write(&format!("{name}.csv"), matrix_csv(e, e_prime, m).as_bytes())?;
        }
        if self.output.wants(Format::Gnuplot) {
            for (k, &target) in self.output.cuts.clone().iter().enumerate() {
                let Some(i) = nearest(e, target) else { continue };
                let mut s = format!("# {name} at E = {:.12e}\n# E' value\n", e[i]);
                for (j, v) in e_prime.iter().enumerate() {
                    let _ = writeln!(s, "{v:.12e} {:.12e}", m[(i, j)]);
                }
                self.write(&format!("{name}_cut{k}.dat"), s.as_bytes())?;
            }
        }
        Ok(())
    }

    /// Structured records are always written as JSON.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(&format!("{name}.json"), text.as_bytes())
    }

    /// Writes the manifest last; it lists every other file.
    pub fn finish(self, mut manifest: RunManifest) -> anyhow::Result<RunManifest> {
        manifest.outputs = self.records;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

fn nearest(values: &[f64], target: f64) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .map(|(i, _)| i)
}
