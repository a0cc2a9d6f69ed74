//! File formats: headered CSV for series and moments, JSON for parameters.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! back reproduces every value bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dense::Mat;
use crate::error::{Error, Result};
use crate::model::{Family, GenerativeParams};
use crate::posterior::Recognition;
use crate::train::FitConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Column names `prefix1, prefix2, …`.
pub fn numbered_header(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// Column names `prefix11, prefix12, …` for row-major `n×n` blocks.
pub fn block_header(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).flat_map(|i| (1..=n).map(move |j| format!("{prefix}{i}_{j}"))).collect()
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (t, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "row {t} has {} values for {} columns",
                row.len(),
                header.len()
            )));
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headered numeric CSV into rows. Every row must have as many
/// fields as the header.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (t, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!("{}: row {}: '{f}' is not a number", path.display(), t + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_blocks(path: &Path, prefix: &str, blocks: &[Mat]) -> Result<()> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let rows: Vec<Vec<f64>> = blocks.iter().map(crate::dense::mat_to_rows).collect();
    write_csv(path, &block_header(prefix, n), &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_theta(path: &Path) -> Result<GenerativeParams> {
    let theta: GenerativeParams = read_json(path)?;
    theta.validate()?;
    Ok(theta)
}

/// A fitted model: generative parameters, variational parameters and the
/// configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub family: Family,
    pub theta: GenerativeParams,
    pub phi: Recognition,
    pub config: FitConfig,
}

impl ModelFile {
    pub fn new(theta: GenerativeParams, phi: Recognition, config: FitConfig) -> Self {
        Self { version: VERSION.to_string(), family: theta.family, theta, phi, config }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.family != m.theta.family {
            return Err(Error::Format(format!(
                "model family {:?} does not match theta family {:?}",
                m.family, m.theta.family
            )));
        }
        m.theta.validate()?;
        if m.phi.obs_dim() != m.theta.obs_dim() || m.phi.latent_dim() != m.theta.latent_dim() {
            return Err(Error::Format("phi and theta dimensions disagree".into()));
        }
        Ok(m)
    }
}

/// Everything needed to replay a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
}
