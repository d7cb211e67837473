//! Newline-delimited metrics records and the per-run manifest. Plots are
//! produced by external tools from these files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use graincode::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content_nll: Option<f64>,
    /// Empirical granularity ratios over the reported window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub usage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_length: Option<f64>,
}

impl MetricsRecord {
    fn validate(&self) -> Result<()> {
        if let Some(r) = &self.ratios {
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "ratio record sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }
}

pub struct MetricsWriter {
    file: fs::File,
    pub path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path)?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        record.validate()?;
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics parse: {e}"))))
        .collect()
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Every command drops one of these next to its outputs.
pub fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    metrics_path: Option<&Path>,
) -> Result<PathBuf> {
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "git": git_describe(),
        "config_hash": cfg.hash()?,
        "config": serde_json::to_value(cfg)
            .map_err(|e| Error::Data(format!("manifest config: {e}")))?,
        "metrics": metrics_path.map(|p| p.display().to_string()),
    });
    let path = out.join(format!("manifest-{command}.json"));
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?,
    )?;
    Ok(path)
}
