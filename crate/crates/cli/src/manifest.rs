use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use hvp_core::trainer::{TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub selection_log: Option<PathBuf>,
    pub metrics_csv: PathBuf,
    pub counters_json: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub completed_epochs: u64,
    pub artifacts: Artifacts,
    pub version: String,
}

pub fn run_id(cfg: &TrainConfig) -> String {
    let objective = serde_json::to_value(cfg.objective)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    format!(
        "{}-{}-N{}-s{}-{}",
        objective,
        cfg.mode.name(),
        cfg.n_views,
        cfg.seed,
        &cfg.hash()[..8]
    )
}

/// Every epoch checkpoint in the run directory, including ones written by
/// earlier invocations of a resumed run.
fn epoch_checkpoints(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("checkpoints");
    let mut found = Vec::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("epoch_") && name.ends_with(".hvpckpt") {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, out_dir: &Path, outcome: &TrainOutcome, started: DateTime<Utc>) -> Result<Self> {
        Ok(Self {
            run_id: run_id(cfg),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            started,
            finished: Utc::now(),
            completed_epochs: outcome.completed_epochs,
            artifacts: Artifacts {
                checkpoints: epoch_checkpoints(out_dir)?,
                final_checkpoint: outcome.final_checkpoint.clone(),
                selection_log: outcome.selection_log.clone(),
                metrics_csv: outcome.metrics_csv.clone(),
                counters_json: outcome.counters_json.clone(),
            },
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Manifest of the run a checkpoint belongs to, if it sits in the usual
    /// `<run>/checkpoints/` layout.
    pub fn for_checkpoint(checkpoint: &Path) -> Option<Self> {
        let run_dir = checkpoint.parent()?.parent()?;
        let text = fs::read_to_string(run_dir.join(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }
}
