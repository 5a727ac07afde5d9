use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of `metrics.jsonl`, written after every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u32,
    pub k_active: usize,
    pub lm_loss: f64,
    pub balance: f64,
    pub dispersion: f64,
    pub z: f64,
    pub total: f64,
    pub learning_rate: f64,
    /// Only on evaluation steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_perplexity: Option<f64>,
}

pub struct MetricsLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl MetricsLog {
    /// Opens `path` for appending, first dropping any rows past `keep_through`.
    pub fn open(path: &Path, keep_through: u64) -> Result<Self> {
        if path.exists() {
            // Kept lines are copied verbatim, not re-encoded.
            let old = fs::read_to_string(path).at(path)?;
            let mut text = String::new();
            for line in old.lines().filter(|l| !l.trim().is_empty()) {
                let row: MetricsRow = serde_json::from_str(line).at(path)?;
                if row.step <= keep_through {
                    text.push_str(line);
                    text.push('\n');
                }
            }
            fs::write(path, text).at(path)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .at(path)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let mut line = serde_json::to_vec(row).at(&self.path)?;
        line.push(b'\n');
        self.file.write_all(&line).at(&self.path)
    }
}

pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).at(path))
        .collect()
}
