use super::pipeline::LoadedPair;
use super::{ExperimentError, Result};
use crate::metrics::{aggregate, ImageMetrics, MetricRow, StdMode};
use crate::redcnn::ExpertModel;
use crate::router::{reconstruct, score_reconstruction, GraphContext, RouteLogEntry, NUM_MODELS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Row labels in report order.
pub const METHODS: [&str; 5] = ["Baseline", "Expert 0", "Expert 1", "Expert 2", "A-IDE"];

/// Generating regime to the cluster holding most of its slices.
pub type RegimeMap = BTreeMap<String, usize>;

/// Per-slice scores for every method, in [`METHODS`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScores {
    pub slice_id: String,
    pub cluster: usize,
    pub regime: Option<String>,
    pub chosen: usize,
    pub metrics: Vec<ImageMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub rows: Vec<MetricRow>,
    pub per_cluster: BTreeMap<String, Vec<MetricRow>>,
    pub per_regime: BTreeMap<String, Vec<MetricRow>>,
    /// Fraction of slices routed to the cluster of their generating regime.
    pub oracle_agreement: Option<f64>,
    /// Fraction of slices routed to the cluster they were assigned to.
    pub cluster_agreement: f64,
    pub fallbacks: usize,
    pub slices: Vec<SliceScores>,
    pub routes: Vec<RouteLogEntry>,
}

fn rows_for(slices: &[&SliceScores], mode: StdMode) -> Result<Vec<MetricRow>> {
    METHODS
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let v: Vec<ImageMetrics> = slices.iter().map(|s| s.metrics[m]).collect();
            aggregate(name, &v, mode).map_err(|e| ExperimentError::stage("aggregate", e))
        })
        .collect()
}

/// Scores the baseline and every expert on every test slice, then routes
/// each slice through the agent graph.
pub fn evaluate(
    test: &[LoadedPair],
    baseline: &ExpertModel,
    ctx: &GraphContext,
    clusters: &BTreeMap<String, usize>,
    regimes: Option<&RegimeMap>,
    mode: StdMode,
) -> Result<EvalSection> {
    if test.is_empty() {
        return Err(ExperimentError::stage("evaluate", "empty test set"));
    }
    let scored: Vec<(SliceScores, RouteLogEntry)> = test
        .par_iter()
        .map(|p| {
            let q = &p.quarter;
            let fixed = |m: &ExpertModel| -> Result<ImageMetrics> {
                let g = reconstruct(m, q).map_err(|e| ExperimentError::stage(&q.slice_id, e))?;
                score_reconstruction(&g, &p.full).map_err(|e| ExperimentError::stage(&q.slice_id, e))
            };
            let mut metrics = vec![fixed(baseline)?];
            for i in 0..NUM_MODELS {
                metrics.push(fixed(ctx.registry.expert(i))?);
            }
            let out = ctx
                .run(q, Some(&p.full))
                .map_err(|e| ExperimentError::stage(&q.slice_id, e))?;
            let decision = out
                .envelope
                .decision
                .ok_or_else(|| ExperimentError::stage(&q.slice_id, "no routing decision"))?;
            let routed = out
                .envelope
                .metrics
                .ok_or_else(|| ExperimentError::stage(&q.slice_id, "no routed metrics"))?;
            metrics.push(routed);
            let cluster = *clusters
                .get(&q.slice_id)
                .ok_or_else(|| ExperimentError::stage(&q.slice_id, "slice has no cluster assignment"))?;
            Ok((
                SliceScores {
                    slice_id: q.slice_id.clone(),
                    cluster,
                    regime: p.regime.clone(),
                    chosen: decision.chosen.get(),
                    metrics,
                },
                RouteLogEntry {
                    slice_id: q.slice_id.clone(),
                    decision,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let (slices, routes): (Vec<SliceScores>, Vec<RouteLogEntry>) = scored.into_iter().unzip();

    let all: Vec<&SliceScores> = slices.iter().collect();
    let rows = rows_for(&all, mode)?;
    let mut per_cluster = BTreeMap::new();
    for c in 0..NUM_MODELS {
        let group: Vec<&SliceScores> = slices.iter().filter(|s| s.cluster == c).collect();
        if !group.is_empty() {
            per_cluster.insert(format!("cluster{c}"), rows_for(&group, mode)?);
        }
    }
    let mut per_regime = BTreeMap::new();
    let names: std::collections::BTreeSet<&String> = slices.iter().filter_map(|s| s.regime.as_ref()).collect();
    for r in names {
        let group: Vec<&SliceScores> = slices.iter().filter(|s| s.regime.as_ref() == Some(r)).collect();
        per_regime.insert(r.clone(), rows_for(&group, mode)?);
    }
    let n = slices.len() as f64;
    let oracle_agreement = regimes.and_then(|map| {
        let judged: Vec<bool> = slices
            .iter()
            .filter_map(|s| s.regime.as_ref().and_then(|r| map.get(r)).map(|&c| c == s.chosen))
            .collect();
        (!judged.is_empty()).then(|| judged.iter().filter(|&&b| b).count() as f64 / judged.len() as f64)
    });
    let cluster_agreement = slices.iter().filter(|s| s.chosen == s.cluster).count() as f64 / n;
    let fallbacks = routes.iter().filter(|r| r.decision.fallback).count();
    Ok(EvalSection {
        rows,
        per_cluster,
        per_regime,
        oracle_agreement,
        cluster_agreement,
        fallbacks,
        slices,
        routes,
    })
}
