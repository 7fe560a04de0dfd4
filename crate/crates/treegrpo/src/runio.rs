//! Run persistence: per-iteration CSV logs, end-of-run summaries, and the
//! JSON run manifest.
//!
//! Everything written here is deterministic for a fixed log: floats are
//! formatted with Rust's shortest round-trip notation, so identical runs
//! produce identical bytes. Manifests are written atomically (temp file
//! plus rename) so a crash never leaves a half-written manifest behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::Digest;

use crate::Result;

/// One training iteration's telemetry. NFE columns count denoiser
/// evaluations charged to this iteration: `nfe_old` for rollouts under the
/// behavior snapshot, `nfe_new` for gradient-bearing edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunRow {
    pub iteration: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub nfe_old: u64,
    pub nfe_new: u64,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str =
    "iteration,reward_mean,reward_std,objective,grad_norm,nfe_old,nfe_new,wall_ms";

impl RunRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.reward_mean,
            self.reward_std,
            self.objective,
            self.grad_norm,
            self.nfe_old,
            self.nfe_new,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog { rows: Vec::new() }
    }

    pub fn push(&mut self, row: RunRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn final_reward(&self) -> Option<f64> {
        self.rows.last().map(|r| r.reward_mean)
    }
}

/// End-of-run digest: final and peak reward, when (if ever) the reward
/// first reached the threshold, and total NFE spent.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub iterations: usize,
    pub final_reward: f64,
    pub peak_reward: f64,
    pub threshold: f64,
    pub iterations_to_threshold: Option<u64>,
    pub total_nfe_old: u64,
    pub total_nfe_new: u64,
}

impl Summary {
    pub fn from_log(log: &RunLog, threshold: f64) -> Option<Summary> {
        let last = log.rows.last()?;
        let peak = log
            .rows
            .iter()
            .map(|r| r.reward_mean)
            .fold(f64::NEG_INFINITY, f64::max);
        Some(Summary {
            iterations: log.rows.len(),
            final_reward: last.reward_mean,
            peak_reward: peak,
            threshold,
            iterations_to_threshold: log
                .rows
                .iter()
                .find(|r| r.reward_mean >= threshold)
                .map(|r| r.iteration),
            total_nfe_old: log.rows.iter().map(|r| r.nfe_old).sum(),
            total_nfe_new: log.rows.iter().map(|r| r.nfe_new).sum(),
        })
    }
}

/// Write the per-iteration CSV and the summary JSON next to each other.
/// Returns (csv_path, summary_path).
pub fn emit_curves(log: &RunLog, dir: &Path, threshold: f64) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("run.csv");
    log.write_csv(&csv_path)?;
    let summary_path = dir.join("summary.json");
    let summary = Summary::from_log(log, threshold);
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&summary_path, body)?;
    Ok((csv_path, summary_path))
}

/// Identifies a run: the exact configuration text it ran with, its hash,
/// seeds, timestamps, and where the outputs went.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub mode: String,
    pub seed: u64,
    pub sampler_seed: u64,
    /// Verbatim resolved configuration (INI text).
    pub config_echo: String,
    pub config_sha256: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub checkpoints: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(mode: &str, seed: u64, sampler_seed: u64, config_echo: String) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode: mode.to_string(),
            seed,
            sampler_seed,
            config_sha256: sha256_hex(config_echo.as_bytes()),
            config_echo,
            started_unix: unix_now(),
            finished_unix: None,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn finalize(&mut self) {
        self.finished_unix = Some(unix_now());
    }

    /// Atomic write: serialize to a sibling temp file, then rename over the
    /// target.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(body.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
