use super::evaluate::{evaluate, RegimeMap, METHODS};
use super::ledger::{ClusterSummary, ModelRecord, RunLedger, SplitCount};
use super::train::{train_model, PatchSet, TrainOutcome, TrainSettings};
use super::{
    split_dataset, CardSource, ExperimentConfig, ExperimentError, PolicyChoice, ProfilerSource, Result, Split,
};
use crate::cluster::{fit_clusters, purity, ClusterModel};
use crate::metrics::{aggregate, ImageMetrics, MetricRow, Report};
use crate::preprocess::io::{Manifest, PairEntry};
use crate::preprocess::phantom::generate_dataset;
use crate::preprocess::{patch_pairs, AugPolicy, HuSlice, PatchPair};
use crate::profiler::remote::profile_remote_all;
use crate::profiler::{profile_builtin, write_cache, StructureProfile};
use crate::redcnn::{self, build, ClusterSlot, ExpertModel, TrainFingerprint};
use crate::router::{
    reconstruct, score_reconstruction, write_route_log, ChatTransport, GraphContext, HttpChat, ModelCard,
    ProfilerChoice, Registry, RouteLogEntry, RoutingPolicy, NUM_MODELS,
};
use crate::tensor::AdamConfig;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub const CARDS_FILE: &str = "cards.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const ROUTES_FILE: &str = "routes.jsonl";
pub const TEST_MANIFEST: &str = "test_manifest.json";

/// A quarter/full pair read into memory.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub entry: PairEntry,
    pub quarter: HuSlice,
    pub full: HuSlice,
    pub regime: Option<String>,
}

pub fn load_pairs(manifest: &Manifest) -> Result<Vec<LoadedPair>> {
    let pairs = manifest.pairs().map_err(|e| ExperimentError::stage("manifest", e))?;
    pairs
        .into_par_iter()
        .map(|entry| {
            let read = |e| {
                manifest
                    .read_slice(e)
                    .map_err(|err| ExperimentError::stage(&entry.pair_id, err))
            };
            Ok(LoadedPair {
                quarter: read(&entry.quarter)?,
                full: read(&entry.full)?,
                regime: entry.quarter.regime.clone(),
                entry,
            })
        })
        .collect()
}

/// Profiles the quarter-dose slice of every pair.
pub fn profile_pairs(pairs: &[LoadedPair], cfg: &super::ProfilerConfig) -> Result<Vec<StructureProfile>> {
    match cfg.source {
        ProfilerSource::Builtin => Ok(pairs.par_iter().map(|p| profile_builtin(&p.quarter)).collect()),
        ProfilerSource::Remote => {
            let slices: Vec<HuSlice> = pairs.iter().map(|p| p.quarter.clone()).collect();
            profile_remote_all(&slices, &cfg.remote).map_err(|e| ExperimentError::stage("profile", e))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSplit {
    pub cluster: usize,
    pub split: Split,
}

/// Per-cluster splits; the baseline trains on their union.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub clusters: Vec<ClusterSplit>,
}

impl SplitPlan {
    fn union(&self, pick: impl Fn(&Split) -> &Vec<PairEntry>) -> Vec<PairEntry> {
        let mut v: Vec<PairEntry> = self.clusters.iter().flat_map(|c| pick(&c.split).clone()).collect();
        v.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        v
    }

    pub fn train(&self) -> Vec<PairEntry> {
        self.union(|s| &s.train)
    }

    pub fn val(&self) -> Vec<PairEntry> {
        self.union(|s| &s.val)
    }

    pub fn test(&self) -> Vec<PairEntry> {
        self.union(|s| &s.test)
    }
}

/// Splits every cluster's pairs separately (cluster from the quarter slice).
pub fn plan_splits(
    pairs: &[PairEntry],
    assignments: &BTreeMap<String, usize>,
    fractions: &super::SplitFractions,
    seed: u64,
) -> Result<SplitPlan> {
    let clusters = (0..NUM_MODELS)
        .map(|c| {
            let members: Vec<PairEntry> = pairs
                .iter()
                .filter(|p| assignments.get(&p.quarter.slice_id) == Some(&c))
                .cloned()
                .collect();
            let split = split_dataset(&members, fractions, seed ^ ((c as u64 + 1) << 40))
                .map_err(|e| ExperimentError::stage(format!("split cluster {c}"), e))?;
            Ok(ClusterSplit { cluster: c, split })
        })
        .collect::<Result<_>>()?;
    Ok(SplitPlan { clusters })
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub baseline: TrainOutcome,
    pub experts: Vec<TrainOutcome>,
    pub records: Vec<ModelRecord>,
}

fn patches_of(pairs: &[PairEntry], by_id: &BTreeMap<&str, &LoadedPair>) -> Result<Vec<PatchPair>> {
    let mut out = Vec::new();
    for p in pairs {
        let lp = by_id
            .get(p.pair_id.as_str())
            .ok_or_else(|| ExperimentError::stage("patches", format!("pair {} not loaded", p.pair_id)))?;
        out.extend(patch_pairs(&lp.quarter, &lp.full).map_err(|e| ExperimentError::stage(&p.pair_id, e))?);
    }
    Ok(out)
}

fn ids_hash(pairs: &[PairEntry]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.pair_id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

struct Job {
    slot: ClusterSlot,
    description: String,
    train: Vec<PairEntry>,
    val: Vec<PairEntry>,
    policy: AugPolicy,
}

/// Trains the baseline and the three experts; all share one initialization.
pub fn train_all(
    plan: &SplitPlan,
    pairs: &[LoadedPair],
    cfg: &ExperimentConfig,
    cards: &[ModelCard],
) -> Result<TrainedModels> {
    let by_id: BTreeMap<&str, &LoadedPair> = pairs.iter().map(|p| (p.entry.pair_id.as_str(), p)).collect();
    let mut jobs = vec![Job {
        slot: ClusterSlot::Baseline,
        description: "Global baseline denoiser trained on every anatomy.".into(),
        train: plan.train(),
        val: plan.val(),
        policy: AugPolicy::Baseline,
    }];
    for c in &plan.clusters {
        jobs.push(Job {
            slot: ClusterSlot::cluster(c.cluster).map_err(|e| ExperimentError::stage("slot", e))?,
            description: cards[c.cluster].description.clone(),
            train: c.split.train.clone(),
            val: c.split.val.clone(),
            policy: AugPolicy::Expert,
        });
    }
    let settings = TrainSettings {
        batch_size: cfg.training.batch_size,
        patches_per_epoch: cfg.training.patches_per_epoch,
        val_patches: cfg.training.val_patches,
        schedule: cfg.schedule.clone(),
        adam: AdamConfig::default(),
    };
    let run = |(k, job): (usize, &Job)| -> Result<(TrainOutcome, ModelRecord)> {
        let start = Instant::now();
        let train_base = patches_of(&job.train, &by_id)?;
        let val_base = patches_of(&job.val, &by_id)?;
        let train_patches = train_base.len();
        let policy = cfg.training.augment.then_some(job.policy);
        let train = PatchSet::new(train_base, policy, cfg.seed ^ 0xA5A5);
        let val = PatchSet::new(val_base, None, 0);
        let mut model = build(cfg.model.config(), cfg.seed)
            .map_err(|e| ExperimentError::stage("build", e))?
            .with_slot(job.slot, job.description.clone());
        model.fingerprint = TrainFingerprint {
            seed: cfg.seed,
            manifest_hash: ids_hash(&job.train),
        };
        log::info!("training {} on {} items", job.slot, train.len());
        let out = train_model(model, &train, &val, &settings, cfg.seed.wrapping_add(k as u64 * 7919))?;
        let record = ModelRecord {
            slot: job.slot.to_string(),
            file: format!("{}.aide", job.slot),
            sha256: String::new(),
            train_pairs: job.train.len(),
            val_pairs: job.val.len(),
            train_patches,
            train_items: out.train_items,
            val_items: out.val_items,
            initial_val_mse: out.initial_val_mse,
            identity_val_mse: out.identity_val_mse,
            curve: out.curve.clone(),
            stopped_early: out.stopped_early,
            lr_reductions: out.lr_reductions,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        Ok((out, record))
    };
    let results: Vec<(TrainOutcome, ModelRecord)> = if cfg.training.parallel {
        jobs.par_iter().enumerate().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().enumerate().map(run).collect::<Result<_>>()?
    };
    let (mut outcomes, records): (Vec<TrainOutcome>, Vec<ModelRecord>) = results.into_iter().unzip();
    let experts = outcomes.split_off(1);
    Ok(TrainedModels {
        baseline: outcomes.remove(0),
        experts,
        records,
    })
}

/// Writes `baseline.aide`, `expert{c}.aide` and the cards; fills in the
/// file digests of `records`.
pub fn save_models(dir: &Path, trained: &mut TrainedModels, cards: &[ModelCard]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let models = std::iter::once(&trained.baseline.model).chain(trained.experts.iter().map(|o| &o.model));
    for (m, rec) in models.zip(trained.records.iter_mut()) {
        let bytes = redcnn::to_bytes(m).map_err(|e| ExperimentError::stage("serialize", e))?;
        let path = dir.join(&rec.file);
        std::fs::write(&path, &bytes).map_err(|e| ExperimentError::io(&path, e))?;
        rec.sha256 = hex::encode(Sha256::digest(&bytes));
    }
    let path = dir.join(CARDS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(cards)?).map_err(|e| ExperimentError::io(&path, e))
}

/// Loads the baseline and the expert registry written by [`save_models`].
pub fn load_registry(dir: &Path) -> Result<(ExpertModel, Registry)> {
    let load = |slot: ClusterSlot| -> Result<ExpertModel> {
        let path = dir.join(format!("{slot}.aide"));
        if !path.exists() {
            return Err(ExperimentError::MissingModel(slot.to_string()));
        }
        redcnn::load(&path).map_err(|e| ExperimentError::stage(path.display().to_string(), e))
    };
    let baseline = load(ClusterSlot::Baseline)?;
    let experts = (0..NUM_MODELS)
        .map(|c| load(ClusterSlot::Cluster(c as u8)))
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(CARDS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
    let cards: Vec<ModelCard> = serde_json::from_str(&text)?;
    let registry = Registry::new(experts, cards).map_err(|e| ExperimentError::stage("registry", e))?;
    Ok((baseline, registry))
}

/// Purity against the generating regimes and the majority cluster of each
/// regime; `None` when any pair lacks a regime tag.
pub fn regime_summary(pairs: &[LoadedPair], model: &ClusterModel) -> (Option<f64>, Option<RegimeMap>) {
    if pairs.iter().any(|p| p.regime.is_none()) {
        return (None, None);
    }
    let names: Vec<String> = {
        let mut v: Vec<String> = pairs.iter().filter_map(|p| p.regime.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let assigned: Vec<usize> = pairs.iter().map(|p| model.assignments[&p.quarter.slice_id]).collect();
    let truth: Vec<usize> = pairs
        .iter()
        .map(|p| names.iter().position(|n| Some(n) == p.regime.as_ref()).expect("listed"))
        .collect();
    let mut map = RegimeMap::new();
    for (i, name) in names.iter().enumerate() {
        let mut counts = vec![0usize; model.k()];
        for (&a, &t) in assigned.iter().zip(&truth) {
            if t == i {
                counts[a] += 1;
            }
        }
        let counts: Vec<f64> = counts.into_iter().map(|c| c as f64).collect();
        map.insert(name.clone(), crate::profiler::argmax(&counts));
    }
    (Some(purity(&assigned, &truth)), Some(map))
}

fn unix_now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

fn run_dir(root: &Path, hash: &str) -> Result<PathBuf> {
    let stamp = unix_now().trim_start_matches("unix:").to_string();
    for n in 0.. {
        let name = if n == 0 {
            format!("{}-{stamp}", &hash[..12])
        } else {
            format!("{}-{stamp}-{n}", &hash[..12])
        };
        let dir = root.join(name);
        if !dir.exists() {
            std::fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
            return Ok(dir);
        }
    }
    unreachable!("unbounded search")
}

/// Model cards under the configured card source.
pub fn cards_for(cfg: &ExperimentConfig, clusters: &ClusterModel) -> Result<Vec<ModelCard>> {
    match cfg.routing.cards {
        CardSource::Clusters => {
            ModelCard::from_clusters(clusters, cfg.routing.top_labels).map_err(|e| ExperimentError::stage("cards", e))
        }
        CardSource::Reference => Ok(ModelCard::reference_cards()),
    }
}

/// Builds the routing context for a registry under the configured policy.
pub fn graph_context(cfg: &ExperimentConfig, registry: Registry, chat: Option<Arc<dyn ChatTransport>>) -> GraphContext {
    let profiler = match cfg.profiler.source {
        ProfilerSource::Builtin => ProfilerChoice::Builtin,
        ProfilerSource::Remote => ProfilerChoice::Remote(cfg.profiler.remote.clone()),
    };
    let policy = match cfg.routing.policy {
        PolicyChoice::Rule => RoutingPolicy::Rule,
        PolicyChoice::Llm => {
            let t = chat.unwrap_or_else(|| Arc::new(HttpChat::new(cfg.routing.chat.clone())));
            RoutingPolicy::Llm(t, cfg.routing.chat.clone())
        }
    };
    GraphContext::new(Arc::new(registry), profiler, policy, cfg.routing.max_in_flight)
}

/// Phantoms (unless a manifest is given), profiles, clusters, splits, four
/// trainings, routed evaluation, report and ledger, all under a fresh run
/// directory inside `out_root`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    manifest: Option<&Path>,
    out_root: &Path,
    chat: Option<Arc<dyn ChatTransport>>,
) -> Result<(PathBuf, RunLedger)> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = run_dir(out_root, &hash)?;
    let created_at = unix_now();
    let manifest = match manifest {
        Some(p) => Manifest::load(p).map_err(|e| ExperimentError::stage("manifest", e))?,
        None => generate_dataset(&cfg.phantom, cfg.seed, dir.join("data"))
            .map_err(|e| ExperimentError::stage("phantoms", e))?,
    };
    let pairs = load_pairs(&manifest)?;
    log::info!("{} pairs loaded", pairs.len());

    let profiles = profile_pairs(&pairs, &cfg.profiler)?;
    write_cache(dir.join("profiles.jsonl"), &profiles).map_err(|e| ExperimentError::stage("profiles", e))?;
    let clusters = fit_clusters(&profiles, &cfg.cluster, cfg.seed).map_err(|e| ExperimentError::stage("cluster", e))?;
    clusters
        .save(dir.join("clusters.json"))
        .map_err(|e| ExperimentError::stage("cluster", e))?;
    let (purity, regime_map) = regime_summary(&pairs, &clusters);

    let cards = cards_for(cfg, &clusters)?;

    let entries: Vec<PairEntry> = pairs.iter().map(|p| p.entry.clone()).collect();
    let plan = plan_splits(&entries, &clusters.assignments, &cfg.split, cfg.seed)?;
    let test_entries = plan.test();
    manifest
        .subset(&test_entries)
        .save(dir.join(TEST_MANIFEST))
        .map_err(|e| ExperimentError::stage("test manifest", e))?;
    let splits = plan
        .clusters
        .iter()
        .map(|c| SplitCount {
            cluster: c.cluster,
            train: c.split.train.len(),
            val: c.split.val.len(),
            test: c.split.test.len(),
        })
        .collect();

    let mut trained = train_all(&plan, &pairs, cfg, &cards)?;
    save_models(&dir.join("models"), &mut trained, &cards)?;
    let experts: Vec<ExpertModel> = trained.experts.iter().map(|o| o.model.clone()).collect();
    let registry = Registry::new(experts, cards.clone()).map_err(|e| ExperimentError::stage("registry", e))?;
    let ctx = graph_context(cfg, registry, chat);

    let test_ids: std::collections::BTreeSet<&str> = test_entries.iter().map(|p| p.pair_id.as_str()).collect();
    let test: Vec<LoadedPair> = pairs
        .iter()
        .filter(|p| test_ids.contains(p.entry.pair_id.as_str()))
        .cloned()
        .collect();
    let evaluation = evaluate(
        &test,
        &trained.baseline.model,
        &ctx,
        &clusters.assignments,
        regime_map.as_ref(),
        cfg.std_mode,
    )?;
    write_route_log(dir.join(ROUTES_FILE), &evaluation.routes).map_err(|e| ExperimentError::stage("routes", e))?;
    let report = Report::new(evaluation.rows.clone(), cfg.std_mode);
    report
        .emit(dir.join("report.json"), dir.join("report.csv"))
        .map_err(|e| ExperimentError::stage("report", e))?;

    let ledger = RunLedger {
        created_at,
        config_hash: hash,
        config: cfg.clone(),
        pairs_total: pairs.len(),
        clusters: ClusterSummary {
            counts: clusters.counts.clone(),
            inertia: clusters.inertia,
            inertia_trace: clusters.inertia_trace.clone(),
            top_labels: (0..clusters.k())
                .map(|c| clusters.top_labels(c, cfg.routing.top_labels))
                .collect(),
            purity,
            regime_map,
        },
        splits,
        cards,
        models: trained.records,
        routing_log: ROUTES_FILE.into(),
        report,
        evaluation,
    };
    ledger.save(dir.join(LEDGER_FILE))?;
    Ok((dir, ledger))
}

fn read_routes(path: &Path) -> Result<Vec<RouteLogEntry>> {
    let file = std::fs::File::open(path).map_err(|e| ExperimentError::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| ExperimentError::io(path, e))?)?))
        .collect()
}

/// Recomputes the report rows of a finished run from its stored models,
/// test manifest and routing log alone.
pub fn recompute_rows(dir: &Path) -> Result<Vec<MetricRow>> {
    let ledger = RunLedger::load(dir.join(LEDGER_FILE))?;
    let (baseline, registry) = load_registry(&dir.join("models"))?;
    let manifest = Manifest::load(dir.join(TEST_MANIFEST)).map_err(|e| ExperimentError::stage("manifest", e))?;
    let pairs = load_pairs(&manifest)?;
    let routes: BTreeMap<String, usize> = read_routes(&dir.join(&ledger.routing_log))?
        .into_iter()
        .map(|r| (r.slice_id, r.decision.chosen.get()))
        .collect();
    // evaluation order is the ledger's slice order
    let by_slice: BTreeMap<&str, &LoadedPair> = pairs.iter().map(|p| (p.quarter.slice_id.as_str(), p)).collect();
    let per_slice: Vec<Vec<ImageMetrics>> = ledger
        .evaluation
        .slices
        .par_iter()
        .map(|s| {
            let p = by_slice
                .get(s.slice_id.as_str())
                .ok_or_else(|| ExperimentError::stage(&s.slice_id, "missing from test manifest"))?;
            let chosen = *routes
                .get(&s.slice_id)
                .ok_or_else(|| ExperimentError::stage(&s.slice_id, "missing from routing log"))?;
            let score = |m: &ExpertModel| -> Result<ImageMetrics> {
                let g = reconstruct(m, &p.quarter).map_err(|e| ExperimentError::stage(&s.slice_id, e))?;
                score_reconstruction(&g, &p.full).map_err(|e| ExperimentError::stage(&s.slice_id, e))
            };
            let mut v = vec![score(&baseline)?];
            for c in 0..NUM_MODELS {
                v.push(score(registry.expert(c))?);
            }
            v.push(v[1 + chosen]);
            Ok(v)
        })
        .collect::<Result<_>>()?;
    METHODS
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let col: Vec<ImageMetrics> = per_slice.iter().map(|v| v[m]).collect();
            aggregate(name, &col, ledger.config.std_mode).map_err(|e| ExperimentError::stage("aggregate", e))
        })
        .collect()
}
