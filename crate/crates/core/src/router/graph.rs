use super::llm::BoundedChat;
use super::{route_llm, route_rule, validate_cards, ChatConfig, ChatTransport, ModelCard, RouteDecision, NUM_MODELS};
use crate::metrics::{image_metrics, ImageMetrics};
use crate::preprocess::{
    covered_region, grids_to_tensor, normalize_hu, patchify, tensor_to_grids, unpatchify_to, Grid, HuSlice,
};
use crate::profiler::remote::{profile_remote, RemoteConfig};
use crate::profiler::{profile_builtin, StructureProfile};
use crate::redcnn::ExpertModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeName {
    ProcessImages,
    SelectPretrainedModels,
    GetResults,
}

impl fmt::Display for NodeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ProcessImages => "process_images",
            Self::SelectPretrainedModels => "select_pretrained_models",
            Self::GetResults => "get_results",
        })
    }
}

#[derive(Debug, Error)]
#[error("{node} failed: {message}")]
pub struct GraphError {
    pub node: NodeName,
    pub message: String,
}

impl GraphError {
    fn at(node: NodeName, message: impl fmt::Display) -> Self {
        Self {
            node,
            message: message.to_string(),
        }
    }
}

/// Named stages joined by directed edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentGraph {
    pub nodes: Vec<NodeName>,
    pub edges: Vec<(NodeName, NodeName)>,
}

impl AgentGraph {
    /// `process_images -> select_pretrained_models -> get_results`.
    pub fn standard() -> Self {
        use NodeName::*;
        Self {
            nodes: vec![ProcessImages, SelectPretrainedModels, GetResults],
            edges: vec![
                (ProcessImages, SelectPretrainedModels),
                (SelectPretrainedModels, GetResults),
            ],
        }
    }

    /// Checks the structure and returns the execution order: a single path
    /// from `process_images` to `get_results` that passes through
    /// `select_pretrained_models` once.
    pub fn validate(&self) -> Result<Vec<NodeName>, String> {
        let nodes: BTreeSet<NodeName> = self.nodes.iter().copied().collect();
        if nodes.len() != self.nodes.len() {
            return Err("duplicate node".into());
        }
        let mut out: BTreeMap<NodeName, Vec<NodeName>> = BTreeMap::new();
        let mut indeg: BTreeMap<NodeName, usize> = nodes.iter().map(|&n| (n, 0)).collect();
        for &(a, b) in &self.edges {
            if !nodes.contains(&a) || !nodes.contains(&b) {
                return Err(format!("edge {a} -> {b} references an unknown node"));
            }
            out.entry(a).or_default().push(b);
            *indeg.get_mut(&b).expect("known node") += 1;
        }
        let starts: Vec<NodeName> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let terminals: Vec<NodeName> = nodes.iter().copied().filter(|n| !out.contains_key(n)).collect();
        if starts != [NodeName::ProcessImages] {
            return Err(format!("start nodes {starts:?}, expected [ProcessImages]"));
        }
        if terminals != [NodeName::GetResults] {
            return Err(format!("terminal nodes {terminals:?}, expected [GetResults]"));
        }
        let mut order = vec![NodeName::ProcessImages];
        let mut cur = NodeName::ProcessImages;
        while let Some(next) = out.get(&cur) {
            if next.len() != 1 {
                return Err(format!("{cur} branches to {} nodes", next.len()));
            }
            cur = next[0];
            if order.contains(&cur) {
                return Err(format!("cycle through {cur}"));
            }
            order.push(cur);
        }
        if order.len() != nodes.len() {
            return Err("unreachable nodes".into());
        }
        if order.iter().filter(|&&n| n == NodeName::SelectPretrainedModels).count() != 1 {
            return Err("path must visit select_pretrained_models exactly once".into());
        }
        Ok(order)
    }
}

/// The three experts with their cards. Immutable while routing.
#[derive(Debug, Clone)]
pub struct Registry {
    experts: Vec<ExpertModel>,
    cards: Vec<ModelCard>,
}

impl Registry {
    pub fn new(experts: Vec<ExpertModel>, cards: Vec<ModelCard>) -> Result<Self, String> {
        if experts.len() != NUM_MODELS {
            return Err(format!("{} experts, expected {NUM_MODELS}", experts.len()));
        }
        validate_cards(&cards).map_err(|e| e.to_string())?;
        Ok(Self { experts, cards })
    }

    pub fn expert(&self, i: usize) -> &ExpertModel {
        &self.experts[i]
    }

    pub fn cards(&self) -> &[ModelCard] {
        &self.cards
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfilerChoice {
    Builtin,
    Remote(RemoteConfig),
}

#[derive(Clone)]
pub enum RoutingPolicy {
    Rule,
    Llm(Arc<dyn ChatTransport>, ChatConfig),
}

impl fmt::Debug for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rule => f.write_str("Rule"),
            Self::Llm(_, cfg) => f.debug_tuple("Llm").field(&cfg.model).finish(),
        }
    }
}

/// Provenance of one slice through the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub slice_id: String,
    pub patient_id: String,
    pub profile: Option<StructureProfile>,
    pub decision: Option<RouteDecision>,
    pub metrics: Option<ImageMetrics>,
    pub visited: Vec<NodeName>,
}

/// Finished slice: provenance plus the reconstructed full-size grid.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub envelope: Envelope,
    pub denoised: Grid,
}

/// Graph, registry and policies shared by all slices of a run.
pub struct GraphContext {
    pub graph: AgentGraph,
    pub registry: Arc<Registry>,
    pub profiler: ProfilerChoice,
    pub policy: RoutingPolicy,
    pub max_in_flight: usize,
}

impl GraphContext {
    /// Standard graph; an LLM policy gets its own request bound.
    pub fn new(registry: Arc<Registry>, profiler: ProfilerChoice, policy: RoutingPolicy, max_in_flight: usize) -> Self {
        let policy = match policy {
            RoutingPolicy::Llm(t, cfg) => {
                let bounded: Arc<dyn ChatTransport> = Arc::new(BoundedChat::new(t, cfg.max_in_flight));
                RoutingPolicy::Llm(bounded, cfg)
            }
            rule => rule,
        };
        Self {
            graph: AgentGraph::standard(),
            registry,
            profiler,
            policy,
            max_in_flight,
        }
    }

    fn process_images(&self, slice: &HuSlice) -> Result<StructureProfile, GraphError> {
        match &self.profiler {
            ProfilerChoice::Builtin => Ok(profile_builtin(slice)),
            ProfilerChoice::Remote(cfg) => {
                profile_remote(slice, cfg).map_err(|e| GraphError::at(NodeName::ProcessImages, e))
            }
        }
    }

    fn select(&self, profile: &StructureProfile) -> RouteDecision {
        let cards = self.registry.cards();
        match &self.policy {
            RoutingPolicy::Rule => route_rule(profile, cards),
            RoutingPolicy::Llm(t, cfg) => route_llm(profile, cards, t.as_ref(), cfg),
        }
    }

    /// Denoises with the chosen expert and scores against `reference` when given.
    pub fn get_results(
        &self,
        slice: &HuSlice,
        reference: Option<&HuSlice>,
        decision: &RouteDecision,
    ) -> Result<(Grid, Option<ImageMetrics>), GraphError> {
        let err = |e: String| GraphError::at(NodeName::GetResults, e);
        let model = self.registry.expert(decision.chosen.get());
        let denoised = reconstruct(model, slice).map_err(err)?;
        let metrics = reference
            .map(|r| score_reconstruction(&denoised, r))
            .transpose()
            .map_err(err)?;
        Ok((denoised, metrics))
    }

    /// Runs every node of the graph for one slice.
    pub fn run(&self, slice: &HuSlice, reference: Option<&HuSlice>) -> Result<GraphOutput, GraphError> {
        let order = self
            .graph
            .validate()
            .map_err(|e| GraphError::at(NodeName::ProcessImages, format!("invalid graph: {e}")))?;
        let mut env = Envelope {
            slice_id: slice.slice_id.clone(),
            patient_id: slice.patient_id.clone(),
            profile: None,
            decision: None,
            metrics: None,
            visited: Vec::new(),
        };
        let mut denoised = None;
        for node in order {
            match node {
                NodeName::ProcessImages => env.profile = Some(self.process_images(slice)?),
                NodeName::SelectPretrainedModels => {
                    let profile = env
                        .profile
                        .as_ref()
                        .ok_or_else(|| GraphError::at(node, "no profile in envelope"))?;
                    env.decision = Some(self.select(profile));
                }
                NodeName::GetResults => {
                    let decision = env
                        .decision
                        .as_ref()
                        .ok_or_else(|| GraphError::at(node, "no decision in envelope"))?;
                    let (grid, metrics) = self.get_results(slice, reference, decision)?;
                    env.metrics = metrics;
                    denoised = Some(grid);
                }
            }
            env.visited.push(node);
        }
        let denoised = denoised.ok_or_else(|| GraphError::at(NodeName::GetResults, "not executed"))?;
        Ok(GraphOutput {
            envelope: env,
            denoised,
        })
    }
}

/// Normalize, tile, denoise and reassemble one slice; the uncovered border is 0.
pub fn reconstruct(model: &ExpertModel, slice: &HuSlice) -> Result<Grid, String> {
    let patches = patchify(&normalize_hu(slice)).map_err(|e| e.to_string())?;
    let input = grids_to_tensor(&patches).map_err(|e| e.to_string())?;
    let out = model.denoise(&input).map_err(|e| e.to_string())?;
    unpatchify_to(&tensor_to_grids(&out), slice.width(), slice.height(), 0.0).map_err(|e| e.to_string())
}

/// Metrics over the covered square against the normalized reference slice.
pub fn score_reconstruction(denoised: &Grid, reference: &HuSlice) -> Result<ImageMetrics, String> {
    let pred = covered_region(denoised).map_err(|e| e.to_string())?;
    let target = covered_region(&normalize_hu(reference)).map_err(|e| e.to_string())?;
    image_metrics(&pred, &target).map_err(|e| e.to_string())
}

/// Runs the graph over many `(quarter, optional full)` slices with at most
/// `ctx.max_in_flight` envelopes in flight. Output order follows the input.
pub fn run_many(ctx: &GraphContext, inputs: &[(HuSlice, Option<HuSlice>)]) -> Vec<Result<GraphOutput, GraphError>> {
    let run = || inputs.par_iter().map(|(q, f)| ctx.run(q, f.as_ref())).collect();
    match rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.max_in_flight.max(1))
        .build()
    {
        Ok(pool) => pool.install(run),
        Err(e) => {
            log::warn!("could not build routing pool ({e}); using the global pool");
            run()
        }
    }
}
