//! Per-round records (`records.csv`) and the run manifest (`manifest.json`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One row per round; round 0 is the unpruned trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRoundRecord {
    pub round: usize,
    pub remaining_params: usize,
    pub remaining_pct: f64,
    pub flops: u64,
    /// Top-1 test accuracy in percent, after the round's final epoch.
    pub top1_acc: f64,
    /// AIAP threshold used for the round.
    #[serde(rename = "threshold_T")]
    pub threshold: Option<f64>,
    pub wall_s: f64,
}

pub fn write_records(path: &Path, records: &[PruneRoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PruneRoundRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<PruneRoundRecord>, _>>()
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// The stopping rule fired.
    Completed,
    /// The policy could not prune anything further.
    Saturated,
    /// The round cap was reached first.
    RoundLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub rounds: usize,
    pub original_params: usize,
    pub baseline_acc: f64,
    pub dense_flops: u64,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
