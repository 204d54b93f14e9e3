//! Append-only JSONL metric streams and the per-run manifest.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LapoError, Result};

pub const CODE_VERSION: &str = concat!("lapo ", env!("CARGO_PKG_VERSION"));

/// One JSON object per line, flushed as written so a crashed run leaves a
/// valid prefix.
pub struct JsonlWriter {
    path: PathBuf,
    file: File,
}

impl JsonlWriter {
    /// Creates (or truncates) the file.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| LapoError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| LapoError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LapoError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| LapoError::Invalid(e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| LapoError::io(&self.path, e))
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| LapoError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LapoError::Parse {
                what: "metrics file",
                offset: i as u64,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_latent: f64,
    pub loss_end: f64,
    pub loss_action: f64,
    pub lr: f64,
}

/// One line per update. Update 0 is the pre-training evaluation and carries
/// no training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub update: usize,
    /// Greedy evaluation results, present on evaluation updates only.
    pub seen_success: Option<f64>,
    pub holdout_success: Option<f64>,
    pub mean_episode_steps: Option<f64>,
    /// Evaluation decision counts per latent length `0..=N_max`.
    pub eval_length_counts: Option<Vec<usize>>,
    #[serde(flatten)]
    pub train: Option<TrainStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Rollout decision counts per candidate length.
    pub length_hist: Vec<usize>,
    pub rollout_success: f64,
    pub rollout_episode_steps: f64,
    pub valid_steps: usize,
    pub loss_action: f64,
    pub loss_latent: f64,
    pub loss_value: f64,
    pub loss_end: f64,
    pub ratio_a_mean: f64,
    pub ratio_a_min: f64,
    pub ratio_a_max: f64,
    pub ratio_z_mean: f64,
    pub ratio_z_min: f64,
    pub ratio_z_max: f64,
    pub ratio_end_mean: f64,
    /// Largest `|r - 1|` over all ratios and valid steps before the first
    /// gradient step of the update.
    pub ratio_identity_dev: f64,
    pub clip_frac: f64,
    /// Steps whose action log-ratio hit the exponent clamp.
    pub ratio_clamped: usize,
    pub explained_var: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
    pub grad_norm_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config_digest: String,
    pub code_version: String,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, deterministic: bool, config: &C) -> Result<Self> {
        let value = serde_json::to_value(config).map_err(|e| LapoError::Invalid(e.to_string()))?;
        let canon = serde_json::to_vec(&value).map_err(|e| LapoError::Invalid(e.to_string()))?;
        Ok(Self {
            command: command.to_string(),
            seed,
            deterministic,
            config_digest: hex::encode(Sha256::digest(&canon)),
            code_version: CODE_VERSION.to_string(),
            config: value,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| LapoError::io(dir, e))?;
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| LapoError::Invalid(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| LapoError::io(&path, e))?;
        Ok(path)
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| LapoError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
