//! Expert selection: model cards, the affinity rule router, the chat-model
//! router with its prompt protocol, and the three-node agent graph.

mod graph;
pub mod llm;
mod prompt;

pub use graph::{
    reconstruct, run_many, score_reconstruction, AgentGraph, Envelope, GraphContext, GraphError, GraphOutput, NodeName,
    ProfilerChoice, Registry, RoutingPolicy,
};
pub use llm::{parse_reply, route_llm, BoundedChat, ChatConfig, ChatMessage, ChatTransport, HttpChat, ReplyParse};
pub use prompt::{build_prompt, Prompt, REPLY_ONLY, SYSTEM_PROMPT};

use crate::cluster::ClusterModel;
use crate::profiler::{label_index, StructureProfile, LABELS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const NUM_MODELS: usize = 3;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("model card error: {0}")]
    Cards(String),
    #[error("model index {0} outside 0..3")]
    Index(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RouterError>;

/// Index of one of the three experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ModelIndex(u8);

impl ModelIndex {
    pub fn new(i: usize) -> Result<Self> {
        if i < NUM_MODELS {
            Ok(Self(i as u8))
        } else {
            Err(RouterError::Index(i))
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for ModelIndex {
    type Error = RouterError;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v as usize)
    }
}

impl From<ModelIndex> for u8 {
    fn from(m: ModelIndex) -> u8 {
        m.0
    }
}

impl std::fmt::Display for ModelIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Model {}", self.0)
    }
}

/// Description and structure affinities of one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model_index: ModelIndex,
    pub description: String,
    pub affinity: BTreeMap<String, f64>,
}

impl ModelCard {
    fn uniform(index: usize, description: &str, labels: &[&str]) -> Self {
        let w = 1.0 / labels.len() as f64;
        Self {
            model_index: ModelIndex(index as u8),
            description: description.into(),
            affinity: labels.iter().map(|l| (l.to_string(), w)).collect(),
        }
    }

    /// The three hand-written cards, with uniform affinity over the
    /// structures each description names.
    pub fn reference_cards() -> Vec<ModelCard> {
        vec![
            Self::uniform(
                0,
                "This model excels at analyzing abdomen, spine, pancreas, spleen, and kidneys. It is fine-tuned for gastrointestinal and urological workflows.",
                &["Abdomen", "Spine", "Pancreas", "Spleen", "Kidneys"],
            ),
            Self::uniform(
                1,
                "This model specializes in identifying prostate and pelvis. It offers enhanced sensitivity for small pelvic lesions and subtle urogenital abnormalities.",
                &["Prostate", "Pelvis"],
            ),
            Self::uniform(
                2,
                "This model is optimized for lungs, spleen, and chest structure. It is ideal for detecting respiratory conditions and lung abnormalities.",
                &["Lungs", "Spleen", "Chest"],
            ),
        ]
    }

    /// Cards from a cluster characterization: the `top` most probable
    /// structures of each cluster, weighted by their renormalized mean
    /// probability.
    pub fn from_clusters(model: &ClusterModel, top: usize) -> Result<Vec<ModelCard>> {
        if model.k() != NUM_MODELS {
            return Err(RouterError::Cards(format!(
                "{} clusters, expected {NUM_MODELS}",
                model.k()
            )));
        }
        (0..NUM_MODELS)
            .map(|c| {
                let top = model.top_labels(c, top);
                let total: f64 = top.iter().map(|(_, p)| p).sum();
                if top.is_empty() || total <= 0.0 {
                    return Err(RouterError::Cards(format!("cluster {c} has no characterization")));
                }
                let names: Vec<String> = top.iter().map(|(l, _)| l.to_lowercase()).collect();
                Ok(ModelCard {
                    model_index: ModelIndex(c as u8),
                    description: format!(
                        "This model excels at analyzing {}. It was trained on cluster {c} slices.",
                        english_list(&names)
                    ),
                    affinity: top.into_iter().map(|(l, p)| (l, p / total)).collect(),
                })
            })
            .collect()
    }
}

fn english_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [rest @ .., last] => format!("{}, and {last}", rest.join(", ")),
    }
}

/// Exactly three cards, indices 0, 1, 2 in order, known labels, weights in [0, 1].
pub fn validate_cards(cards: &[ModelCard]) -> Result<()> {
    if cards.len() != NUM_MODELS {
        return Err(RouterError::Cards(format!(
            "{} cards, expected {NUM_MODELS}",
            cards.len()
        )));
    }
    for (i, c) in cards.iter().enumerate() {
        if c.model_index.get() != i {
            return Err(RouterError::Cards(format!(
                "card {i} carries index {}",
                c.model_index.get()
            )));
        }
        if c.description.trim().is_empty() {
            return Err(RouterError::Cards(format!("card {i} has an empty description")));
        }
        for (label, w) in &c.affinity {
            if label_index(label).is_none() {
                return Err(RouterError::Cards(format!("card {i}: unknown structure {label:?}")));
            }
            if !(0.0..=1.0).contains(w) {
                return Err(RouterError::Cards(format!("card {i}: weight {w} for {label}")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Rule,
    Llm,
}

/// Outcome of one routing call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub chosen: ModelIndex,
    pub policy: PolicyKind,
    pub raw_response: String,
    pub fallback: bool,
    pub latency_ms: f64,
}

/// `sum_label profile[label] * affinity[label]` per card.
pub fn rule_scores(profile: &StructureProfile, cards: &[ModelCard]) -> Vec<f64> {
    cards
        .iter()
        .map(|c| {
            c.affinity
                .iter()
                .filter_map(|(l, w)| label_index(l).map(|i| profile.probs[i] * w))
                .sum()
        })
        .collect()
}

/// Affinity argmax, ties to the lowest index.
pub fn route_rule(profile: &StructureProfile, cards: &[ModelCard]) -> RouteDecision {
    let start = std::time::Instant::now();
    let scores = rule_scores(profile, cards);
    let best = crate::profiler::argmax(&scores);
    RouteDecision {
        chosen: ModelIndex(best as u8),
        policy: PolicyKind::Rule,
        raw_response: format!(
            "rule scores [{}]",
            scores.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(", ")
        ),
        fallback: false,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// One line of the routing log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteLogEntry {
    pub slice_id: String,
    pub decision: RouteDecision,
}

pub fn write_route_log(path: impl AsRef<Path>, entries: &[RouteLogEntry]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| RouterError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// The reference profile from the prompt example: Lungs 0.9491 with the
/// listed minor structures. The listed values sum to 0.9999; the remaining
/// 0.0001 is spread evenly over the twelve structures shown as 0.0000.
pub fn lung_fixture_profile() -> StructureProfile {
    let listed = [
        ("Lungs", 0.9491),
        ("Spleen", 0.0053),
        ("Chest", 0.0375),
        ("Spine", 0.0031),
        ("Ribs", 0.0047),
        ("Thyroid", 0.0001),
        ("Esophagus", 0.0001),
    ];
    let residual = (1.0 - listed.iter().map(|(_, p)| p).sum::<f64>()) / (LABELS.len() - listed.len()) as f64;
    let mut probs = vec![residual; LABELS.len()];
    for (l, p) in listed {
        probs[label_index(l).expect("known label")] = p;
    }
    StructureProfile::new("fixture-lung", probs, crate::profiler::ProfileSource::Remote).expect("fixture sums to one")
}
