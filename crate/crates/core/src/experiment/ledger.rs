use super::evaluate::{EvalSection, RegimeMap};
use super::train::CurvePoint;
use super::{ExperimentConfig, ExperimentError, Result};
use crate::metrics::Report;
use crate::router::ModelCard;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

/// Keys whose values depend on wall-clock time; dropped from the canonical form.
pub const VOLATILE_KEYS: [&str; 3] = ["created_at", "latency_ms", "wall_seconds"];

/// Training record of one registry slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub slot: String,
    pub file: String,
    pub sha256: String,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Patch pairs before augmentation.
    pub train_patches: usize,
    /// Items after augmentation.
    pub train_items: usize,
    pub val_items: usize,
    pub initial_val_mse: f64,
    pub identity_val_mse: f64,
    pub curve: Vec<CurvePoint>,
    pub stopped_early: bool,
    pub lr_reductions: u32,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub counts: Vec<usize>,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
    pub top_labels: Vec<Vec<(String, f64)>>,
    /// Present for synthetic data with known regimes.
    pub purity: Option<f64>,
    pub regime_map: Option<RegimeMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCount {
    pub cluster: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Everything a run produced, in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub created_at: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub pairs_total: usize,
    pub clusters: ClusterSummary,
    pub splits: Vec<SplitCount>,
    pub cards: Vec<ModelCard>,
    pub models: Vec<ModelRecord>,
    pub routing_log: String,
    pub report: Report,
    pub evaluation: EvalSection,
}

fn strip(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for k in VOLATILE_KEYS {
                map.remove(k);
            }
            map.values_mut().for_each(strip);
        }
        Value::Array(items) => items.iter_mut().for_each(strip),
        _ => {}
    }
}

/// Compact JSON with sorted keys and every volatile key removed.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    strip(&mut v);
    Ok(serde_json::to_string(&v)?)
}

impl RunLedger {
    pub fn canonical(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| ExperimentError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
