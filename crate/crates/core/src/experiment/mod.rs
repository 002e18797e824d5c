//! End-to-end experiment: seeded splits, baseline and expert training,
//! routed evaluation and the run ledger.

mod evaluate;
mod ledger;
mod pipeline;
mod train;

pub use evaluate::{evaluate, EvalSection, RegimeMap, METHODS};
pub use ledger::{canonical_json, ModelRecord, RunLedger, VOLATILE_KEYS};
pub use pipeline::{
    cards_for, graph_context, load_pairs, load_registry, plan_splits, profile_pairs, recompute_rows, regime_summary,
    run_pipeline, save_models, train_all, ClusterSplit, LoadedPair, SplitPlan, TrainedModels, CARDS_FILE, LEDGER_FILE,
    ROUTES_FILE, TEST_MANIFEST,
};
pub use train::{train_model, CurvePoint, PatchSet, TrainOutcome, TrainSettings};

use crate::cluster::ClusterConfig;
use crate::metrics::StdMode;
use crate::preprocess::io::PairEntry;
use crate::preprocess::phantom::PhantomConfig;
use crate::profiler::remote::RemoteConfig;
use crate::redcnn::RedCnnConfig;
use crate::router::ChatConfig;
use crate::tensor::TrainSchedule;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const MIN_SPLIT_PAIRS: usize = 5;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("split needs at least {MIN_SPLIT_PAIRS} pairs, got {0}")]
    TooFewPairs(usize),
    #[error("training of {slot} diverged at epoch {epoch}: val {val_mse:.3e} vs initial {initial:.3e}")]
    Diverged {
        slot: String,
        epoch: u32,
        val_mse: f64,
        initial: f64,
        curve: Vec<CurvePoint>,
    },
    #[error("registry slot {0} is missing")]
    MissingModel(String),
    #[error("{context}: {message}")]
    Stage { context: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub(crate) fn stage(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Self::Stage {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Keep all pairs of a patient in one split.
    pub per_patient: bool,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
            per_patient: false,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !v.is_finite() || *v <= 0.0) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(ExperimentError::Config(format!(
                "split fractions {f:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Network size: a named preset or explicit layer/channel counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub channels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = RedCnnConfig::desk();
        Self {
            layers: d.num_enc_layers,
            channels: d.channels,
        }
    }
}

impl ModelSpec {
    pub fn reference() -> Self {
        let d = RedCnnConfig::default();
        Self {
            layers: d.num_enc_layers,
            channels: d.channels,
        }
    }

    pub fn config(&self) -> RedCnnConfig {
        RedCnnConfig::with_layers(self.layers, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Patches drawn (without replacement) per epoch; all when absent.
    pub patches_per_epoch: Option<usize>,
    /// Fixed validation subset size; all when absent.
    pub val_patches: Option<usize>,
    pub augment: bool,
    /// Train the four models concurrently instead of one after another.
    pub parallel: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            patches_per_epoch: None,
            val_patches: None,
            augment: true,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolicyChoice {
    #[default]
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CardSource {
    /// Affinities from each cluster's characterization.
    #[default]
    Clusters,
    /// The three hand-written cards.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub policy: PolicyChoice,
    pub cards: CardSource,
    pub top_labels: usize,
    pub max_in_flight: usize,
    pub chat: ChatConfig,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            policy: PolicyChoice::Rule,
            cards: CardSource::Clusters,
            top_labels: 5,
            max_in_flight: 4,
            chat: ChatConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProfilerSource {
    #[default]
    Builtin,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilerConfig {
    pub source: ProfilerSource,
    pub remote: RemoteConfig,
}

/// Everything a run depends on; hashed into the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub split: SplitFractions,
    pub phantom: PhantomConfig,
    pub model: ModelSpec,
    pub schedule: TrainSchedule,
    pub training: TrainingConfig,
    pub profiler: ProfilerConfig,
    pub cluster: ClusterConfig,
    pub routing: RoutingConfig,
    pub std_mode: StdMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: SplitFractions::default(),
            phantom: PhantomConfig::default(),
            model: ModelSpec::default(),
            schedule: TrainSchedule {
                initial_lr: 1e-3,
                max_epochs: 15,
                ..TrainSchedule::default()
            },
            training: TrainingConfig::default(),
            profiler: ProfilerConfig::default(),
            cluster: ClusterConfig::default(),
            routing: RoutingConfig::default(),
            std_mode: StdMode::Population,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.schedule
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.model
            .config()
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.phantom
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.training.batch_size == 0 {
            return Err(ExperimentError::Config("batch_size must be >= 1".into()));
        }
        if self.cluster.k != crate::router::NUM_MODELS {
            return Err(ExperimentError::Config(format!(
                "cluster.k = {}, the registry holds {} experts",
                self.cluster.k,
                crate::router::NUM_MODELS
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Disjoint train / validation / test pair lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<PairEntry>,
    pub val: Vec<PairEntry>,
    pub test: Vec<PairEntry>,
}

fn split_counts(n: usize, f: &SplitFractions) -> (usize, usize) {
    let train = (n as f64 * f.train).round() as usize;
    let val = ((n as f64 * f.val).round() as usize).min(n - train);
    (train, val)
}

/// Seeded shuffle then cut at the pair level (both doses of a pair always
/// share a split). With `per_patient`, whole patients are assigned greedily
/// in shuffled order toward the same targets.
pub fn split_dataset(pairs: &[PairEntry], fractions: &SplitFractions, seed: u64) -> Result<Split> {
    fractions.validate()?;
    if pairs.len() < MIN_SPLIT_PAIRS {
        return Err(ExperimentError::TooFewPairs(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train, n_val) = split_counts(pairs.len(), fractions);
    let mut sorted: Vec<&PairEntry> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let groups: Vec<Vec<&PairEntry>> = if fractions.per_patient {
        let mut by_patient: BTreeMap<&str, Vec<&PairEntry>> = BTreeMap::new();
        for p in sorted {
            by_patient.entry(&p.quarter.patient_id).or_default().push(p);
        }
        by_patient.into_values().collect()
    } else {
        sorted.into_iter().map(|p| vec![p]).collect()
    };
    let mut groups = groups;
    groups.shuffle(&mut rng);
    let mut split = Split::default();
    for g in groups {
        let target = if split.train.len() < n_train {
            &mut split.train
        } else if split.val.len() < n_val {
            &mut split.val
        } else {
            &mut split.test
        };
        target.extend(g.into_iter().cloned());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::io::ManifestEntry;
    use crate::preprocess::DoseTag;
    use std::collections::HashSet;

    fn pairs(n: usize, per_patient: usize) -> Vec<PairEntry> {
        (0..n)
            .map(|i| {
                let e = |dose, tag| ManifestEntry {
                    slice_id: format!("p{i:03}-{tag}"),
                    patient_id: format!("pt{}", i / per_patient),
                    dose_tag: dose,
                    path: format!("p{i:03}-{tag}.hu16"),
                    pair_id: format!("p{i:03}"),
                    regime: None,
                };
                PairEntry {
                    pair_id: format!("p{i:03}"),
                    quarter: e(DoseTag::Quarter, "q"),
                    full: e(DoseTag::Full, "f"),
                }
            })
            .collect()
    }

    #[test]
    fn hundred_pairs_split_64_16_20() {
        let s = split_dataset(&pairs(100, 1), &SplitFractions::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 16, 20));
        let ids: HashSet<_> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .map(|p| &p.pair_id)
            .collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn same_seed_same_split() {
        let p = pairs(37, 1);
        let f = SplitFractions::default();
        assert_eq!(split_dataset(&p, &f, 9).unwrap(), split_dataset(&p, &f, 9).unwrap());
        assert_ne!(split_dataset(&p, &f, 9).unwrap(), split_dataset(&p, &f, 10).unwrap());
    }

    #[test]
    fn too_few_pairs_rejected() {
        assert!(matches!(
            split_dataset(&pairs(4, 1), &SplitFractions::default(), 0),
            Err(ExperimentError::TooFewPairs(4))
        ));
        let bad = SplitFractions {
            train: 0.5,
            val: 0.5,
            test: 0.0,
            per_patient: false,
        };
        assert!(split_dataset(&pairs(10, 1), &bad, 0).is_err());
    }

    #[test]
    fn per_patient_keeps_patients_together() {
        let f = SplitFractions {
            per_patient: true,
            ..SplitFractions::default()
        };
        let s = split_dataset(&pairs(40, 4), &f, 1).unwrap();
        let patients = |v: &[PairEntry]| v.iter().map(|p| p.quarter.patient_id.clone()).collect::<HashSet<_>>();
        assert!(patients(&s.train).is_disjoint(&patients(&s.test)));
        assert!(patients(&s.train).is_disjoint(&patients(&s.val)));
        assert!(patients(&s.val).is_disjoint(&patients(&s.test)));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 40);
    }

    #[test]
    fn config_toml_round_trip_and_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
        let partial = ExperimentConfig::from_toml("seed = 5\n[model]\nchannels = 8\n").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.model.channels, 8);
        assert_eq!(partial.model.layers, 3);
        assert!(ExperimentConfig::from_toml("[model]\nnum_layers = 2\n").is_err());
    }
}
