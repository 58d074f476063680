//! Machine-readable run summaries.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use tso_core::error::{Error, Result};
use tso_core::trainer::TelemetryRecord;

/// Aggregates of one telemetry stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TelemetrySummary {
    pub steps: usize,
    pub final_loss: f64,
    pub final_reward_w: f64,
    pub final_reward_l: f64,
    pub mean_s_first_decile: f64,
    pub mean_s_last_decile: f64,
}

impl TelemetrySummary {
    pub fn from_records(records: &[TelemetryRecord]) -> Option<Self> {
        let last = records.last()?;
        let k = (records.len() / 10).max(1);
        let mean_s = |slice: &[TelemetryRecord]| {
            slice.iter().map(|r| r.s).sum::<f64>() / slice.len() as f64
        };
        Some(Self {
            steps: records.len(),
            final_loss: last.loss,
            final_reward_w: last.reward_w,
            final_reward_l: last.reward_l,
            mean_s_first_decile: mean_s(&records[..k]),
            mean_s_last_decile: mean_s(&records[records.len() - k..]),
        })
    }
}

/// One comparison arm inside an ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub final_proxy: f64,
    pub telemetry: Option<TelemetrySummary>,
}

/// The run summary written to `report.json` in every run directory. Every
/// acceptance-style check the command can derive from its own artifacts
/// appears as exactly one named flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub train_seed: u64,
    pub world_seed: u64,
    /// Alignment proxy of the starting base policy, when evaluated.
    pub base_proxy: Option<f64>,
    /// Per-stage proxies for multi-stage runs.
    pub stage_proxies: Vec<f64>,
    /// Per-arm results for ablation sweeps.
    pub arms: Vec<ArmReport>,
    /// Worst finite-difference error per loss kind, for gradient checks.
    pub gradcheck_max_rel_err: BTreeMap<String, f64>,
    pub acceptance_flags: BTreeMap<String, bool>,
    /// Scalar aggregates that don't fit the fields above.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    pub telemetry: Option<TelemetrySummary>,
}

impl RunReport {
    pub fn new(command: &str, train_seed: u64, world_seed: u64) -> Self {
        Self {
            command: command.to_string(),
            train_seed,
            world_seed,
            base_proxy: None,
            stage_proxies: Vec::new(),
            arms: Vec::new(),
            gradcheck_max_rel_err: BTreeMap::new(),
            acceptance_flags: BTreeMap::new(),
            metrics: BTreeMap::new(),
            telemetry: None,
        }
    }

    pub fn flag(&mut self, name: &str, value: bool) {
        self.acceptance_flags.insert(name.to_string(), value);
    }

    pub fn all_flags_pass(&self) -> bool {
        self.acceptance_flags.values().all(|&v| v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("report: {e}")))
    }
}
