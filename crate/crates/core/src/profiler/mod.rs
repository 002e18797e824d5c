//! Per-slice probability profiles over a fixed anatomical label list.
//!
//! Two embedders produce the same [`StructureProfile`] shape: a deterministic
//! HU-feature probe ([`profile_builtin`]) and an HTTP embedding service
//! ([`remote::profile_remote`]) that falls back to the probe when unreachable.

mod builtin;
pub mod remote;

pub use builtin::{hu_features, profile_builtin, HuFeatures, SCORE_TABLE};

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

/// Canonical label order.
pub const LABELS: [&str; 19] = [
    "Brain",
    "Lungs",
    "Liver",
    "Stomach",
    "Kidneys",
    "Pancreas",
    "Spleen",
    "Heart",
    "Chest",
    "Abdomen",
    "Pelvis",
    "Spine",
    "Ribs",
    "Bladder",
    "Prostate",
    "Uterus",
    "Adrenal Glands",
    "Thyroid",
    "Esophagus",
];

pub const LABEL_SET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("profile for {slice_id}: {reason}")]
    Invalid { slice_id: String, reason: String },
    #[error("embedding service protocol error: {reason}; body starts {excerpt:?}")]
    Protocol { reason: String, excerpt: String },
    #[error("embedding service transport error: {0}")]
    Transport(String),
    #[error("image encoding: {0}")]
    Encode(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("profile cache line {line}: {source}")]
    Cache {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, ProfilerError>;

/// Ordered, duplicate-free label list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureLabelSet {
    pub version: u32,
    pub labels: Vec<String>,
}

impl StructureLabelSet {
    pub fn canonical() -> Self {
        Self {
            version: LABEL_SET_VERSION,
            labels: LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        !self.labels.iter().all(|l| seen.insert(l))
    }
}

pub fn label_index(label: &str) -> Option<usize> {
    LABELS.iter().position(|l| *l == label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileSource {
    Builtin,
    Remote,
}

/// Probability vector aligned with [`LABELS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureProfile {
    pub slice_id: String,
    pub probs: Vec<f64>,
    pub source: ProfileSource,
}

impl StructureProfile {
    pub fn new(slice_id: impl Into<String>, probs: Vec<f64>, source: ProfileSource) -> Result<Self> {
        let p = Self {
            slice_id: slice_id.into(),
            probs,
            source,
        };
        p.validate()?;
        Ok(p)
    }

    /// Softmax (temperature 1) of raw similarity scores.
    pub fn from_scores(slice_id: impl Into<String>, scores: &[f64], source: ProfileSource) -> Result<Self> {
        let slice_id = slice_id.into();
        if scores.len() != LABELS.len() || scores.iter().any(|s| !s.is_finite()) {
            return Err(ProfilerError::Invalid {
                slice_id,
                reason: format!("expected {} finite scores, got {scores:?}", LABELS.len()),
            });
        }
        Self::new(slice_id, softmax(scores), source)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| ProfilerError::Invalid {
            slice_id: self.slice_id.clone(),
            reason,
        };
        if self.probs.len() != LABELS.len() {
            return Err(invalid(format!(
                "{} entries, expected {}",
                self.probs.len(),
                LABELS.len()
            )));
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("negative or non-finite probability".into()));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        label_index(label).map(|i| self.probs[i])
    }

    /// Index of the most probable label; ties go to the earlier label.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn top_label(&self) -> &'static str {
        LABELS[self.argmax()]
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn io_err(path: &Path, source: std::io::Error) -> ProfilerError {
    ProfilerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one JSON object per line.
pub fn write_cache(path: impl AsRef<Path>, profiles: &[StructureProfile]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in profiles {
        let line = serde_json::to_string(p).map_err(|source| ProfilerError::Cache { line: 0, source })?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<StructureProfile>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: StructureProfile =
            serde_json::from_str(&line).map_err(|source| ProfilerError::Cache { line: i + 1, source })?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}
