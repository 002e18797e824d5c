//! `aide`: phantom generation, profiling, clustering, expert training,
//! routed evaluation and reporting, either stage by stage or as one run.

use aide_core::cluster::{fit_clusters, ClusterModel};
use aide_core::experiment::{
    cards_for, evaluate, graph_context, load_pairs, load_registry, plan_splits, profile_pairs, recompute_rows,
    regime_summary, run_pipeline, save_models, train_all, ExperimentConfig, RunLedger, CARDS_FILE, LEDGER_FILE,
    ROUTES_FILE, TEST_MANIFEST,
};
use aide_core::metrics::{MetricRow, Report};
use aide_core::preprocess::io::{Manifest, PairEntry};
use aide_core::preprocess::phantom::generate_dataset;
use aide_core::preprocess::{augment, patch_pairs, AugPolicy};
use aide_core::profiler::{read_cache, write_cache};
use aide_core::router::{run_many, write_route_log, RouteLogEntry};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "aide", version, about = "Anatomy-routed low-dose CT denoising")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when absent
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic phantom dataset and its manifest
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Checks quarter/full pairing and tiles every pair into patches
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Patch summary (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Profiles every quarter-dose slice
    Profile {
        #[arg(long)]
        manifest: PathBuf,
        /// Profile cache (JSON lines)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits PCA and k-means on cached profiles and writes the model cards
    Cluster {
        #[arg(long)]
        profiles: PathBuf,
        /// Directory for clusters.json and cards.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Splits per cluster and trains the baseline and the experts
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        /// Directory for models/, the test manifest and the training records
        #[arg(long)]
        out: PathBuf,
    },
    /// Routes slices through the agent graph and writes the routing log
    Route {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores the baseline, every expert and the routed system on a test manifest
    Evaluate {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        /// Directory for report.json, report.csv, routes.jsonl and evaluation.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the metric table of a run directory or a report file
    Report {
        /// Run directory (with ledger.json) or a report.json file
        input: PathBuf,
        /// Recomputes the rows from stored models and routes and compares them
        #[arg(long)]
        verify: bool,
    },
    /// Runs every stage under a fresh run directory
    Run {
        /// Root under which the run directory is created
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Existing dataset manifest; phantoms are generated when absent
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn print_rows(rows: &[MetricRow]) {
    println!("| method | RMSE | PSNR (dB) | SSIM | n |");
    println!("|---|---|---|---|---|");
    for r in rows {
        println!(
            "| {} | {:.5} ± {:.5} | {:.3} ± {:.3} | {:.4} ± {:.4} | {} |",
            r.method, r.rmse_mean, r.rmse_std, r.psnr_mean_db, r.psnr_std_db, r.ssim_mean, r.ssim_std, r.n_images
        );
    }
}

fn phantom_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let manifest = generate_dataset(&cfg.phantom, cfg.seed, out)?;
    log::info!("{} slices written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn preprocess(manifest: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let pairs = load_pairs(&manifest)?;
    let summary: Vec<serde_json::Value> = pairs
        .iter()
        .map(|p| -> Result<serde_json::Value> {
            let tiles = patch_pairs(&p.quarter, &p.full)?;
            let baseline = tiles.first().map_or(0, |t| augment(t, AugPolicy::Baseline, 0).len());
            let expert = tiles.first().map_or(0, |t| augment(t, AugPolicy::Expert, 0).len());
            Ok(serde_json::json!({
                "pair_id": p.entry.pair_id,
                "patient_id": p.quarter.patient_id,
                "regime": p.regime,
                "patches": tiles.len(),
                "baseline_items": tiles.len() * baseline,
                "expert_items": tiles.len() * expert,
            }))
        })
        .collect::<Result<_>>()?;
    write_text(out, serde_json::to_string_pretty(&summary)?)?;
    log::info!("{} pairs tiled", summary.len());
    Ok(())
}

fn profile(cfg: &ExperimentConfig, manifest: &Path, out: &Path) -> Result<()> {
    let pairs = load_pairs(&load_manifest(manifest)?)?;
    let profiles = profile_pairs(&pairs, &cfg.profiler)?;
    write_cache(out, &profiles)?;
    log::info!("{} profiles written", profiles.len());
    Ok(())
}

fn cluster(cfg: &ExperimentConfig, profiles: &Path, out: &Path) -> Result<()> {
    let profiles = read_cache(profiles)?;
    let model = fit_clusters(&profiles, &cfg.cluster, cfg.seed)?;
    create_dir(out)?;
    model.save(out.join("clusters.json"))?;
    let cards = cards_for(cfg, &model)?;
    write_text(&out.join(CARDS_FILE), serde_json::to_string_pretty(&cards)?)?;
    for (c, (count, card)) in model.counts.iter().zip(&cards).enumerate() {
        log::info!("cluster {c}: {count} slices, {}", card.description);
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, manifest: &Path, clusters: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest)?;
    let pairs = load_pairs(&manifest)?;
    let model = ClusterModel::load(clusters)?;
    let cards = cards_for(cfg, &model)?;
    let entries: Vec<PairEntry> = pairs.iter().map(|p| p.entry.clone()).collect();
    let plan = plan_splits(&entries, &model.assignments, &cfg.split, cfg.seed)?;
    create_dir(out)?;
    manifest.subset(&plan.test()).save(out.join(TEST_MANIFEST))?;
    let mut trained = train_all(&plan, &pairs, cfg, &cards)?;
    save_models(&out.join("models"), &mut trained, &cards)?;
    write_text(
        &out.join("training.json"),
        serde_json::to_string_pretty(&trained.records)?,
    )?;
    Ok(())
}

fn route(cfg: &ExperimentConfig, models: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let pairs = load_pairs(&load_manifest(manifest)?)?;
    let (_, registry) = load_registry(models)?;
    let ctx = graph_context(cfg, registry, None);
    let inputs: Vec<_> = pairs
        .iter()
        .map(|p| (p.quarter.clone(), Some(p.full.clone())))
        .collect();
    let mut entries = Vec::with_capacity(inputs.len());
    for result in run_many(&ctx, &inputs) {
        let env = result?.envelope;
        let decision = env.decision.context("graph finished without a decision")?;
        log::info!("{} -> Model {}", env.slice_id, decision.chosen.get());
        entries.push(RouteLogEntry {
            slice_id: env.slice_id,
            decision,
        });
    }
    write_route_log(out, &entries)?;
    Ok(())
}

fn evaluate_stage(cfg: &ExperimentConfig, models: &Path, manifest: &Path, clusters: &Path, out: &Path) -> Result<()> {
    let pairs = load_pairs(&load_manifest(manifest)?)?;
    let (baseline, registry) = load_registry(models)?;
    let model = ClusterModel::load(clusters)?;
    let known = pairs
        .iter()
        .all(|p| model.assignments.contains_key(&p.quarter.slice_id));
    let regimes = if known { regime_summary(&pairs, &model).1 } else { None };
    let ctx = graph_context(cfg, registry, None);
    let section = evaluate(
        &pairs,
        &baseline,
        &ctx,
        &model.assignments,
        regimes.as_ref(),
        cfg.std_mode,
    )?;
    create_dir(out)?;
    write_route_log(out.join(ROUTES_FILE), &section.routes)?;
    let report = Report::new(section.rows.clone(), cfg.std_mode);
    report.emit(out.join("report.json"), out.join("report.csv"))?;
    write_text(&out.join("evaluation.json"), serde_json::to_string_pretty(&section)?)?;
    print_rows(&section.rows);
    Ok(())
}

fn report(input: &Path, verify: bool) -> Result<()> {
    if input.is_dir() {
        let ledger = RunLedger::load(input.join(LEDGER_FILE))?;
        print_rows(&ledger.report.rows);
        println!(
            "\nrouting: {:.1}% to the assigned cluster, {} fallbacks",
            100.0 * ledger.evaluation.cluster_agreement,
            ledger.evaluation.fallbacks
        );
        if verify {
            let rows = recompute_rows(input)?;
            if rows != ledger.report.rows {
                bail!("recomputed rows differ from the ledger");
            }
            println!("recomputed rows match the ledger");
        }
        return Ok(());
    }
    if verify {
        bail!("--verify needs a run directory");
    }
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report: Report = serde_json::from_str(&text)?;
    print_rows(&report.rows);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::PhantomGen { out } => phantom_gen(&cfg, out),
        Command::Preprocess { manifest, out } => preprocess(manifest, out),
        Command::Profile { manifest, out } => profile(&cfg, manifest, out),
        Command::Cluster { profiles, out } => cluster(&cfg, profiles, out),
        Command::Train {
            manifest,
            clusters,
            out,
        } => train(&cfg, manifest, clusters, out),
        Command::Route { models, manifest, out } => route(&cfg, models, manifest, out),
        Command::Evaluate {
            models,
            manifest,
            clusters,
            out,
        } => evaluate_stage(&cfg, models, manifest, clusters, out),
        Command::Report { input, verify } => report(input, *verify),
        Command::Run { out, manifest } => {
            let (dir, ledger) = run_pipeline(&cfg, manifest.as_deref(), out, None)?;
            print_rows(&ledger.report.rows);
            println!("\nrun directory: {}", dir.display());
            Ok(())
        }
    }
}
