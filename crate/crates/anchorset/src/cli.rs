//! Command-line interface for the `anchorset` binary.
//!
//! Subcommands: `gen-data` (synthetic train/query/gallery files), `train`
//! (two-stage training with checkpoints, JSONL log, and a run manifest),
//! `eval` (retrieval report for a checkpoint), `export-anchors` (aggregate
//! and dump anchors), `ablate` (grid over start epoch, aggregation, and
//! stage-II losses), and `variance` (anchor vs parametric-center seed sweep).
//!
//! Training is configured by an optional JSON config file plus flag
//! overrides; flags win. The resolved config is echoed into the manifest, so
//! a run can be reproduced from its output directory alone.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training abort (non-finite loss), 4 I/O error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::anchors::{
    aggregate_average, aggregate_weighted, write_anchors, AggregationMethod, UpdateSchedule,
};
use crate::data::{benchmark_splits, read_dataset, write_dataset, SyntheticSpec};
use crate::encoder::{load_checkpoint, save_checkpoint};
use crate::eval::{
    evaluate_retrieval, run_tasks, seed_variance_experiment, PipelineVariant, EMBED_BATCH,
};
use crate::losses::DistanceMetric;
use crate::trainer::{train_from, LossKind, TrainConfig, TrainOutcome};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "anchorset",
    version,
    about = "Two-stage metric learning with non-parametric class anchors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic train/query/gallery dataset files.
    GenData(GenDataArgs),
    /// Train a model (optionally resuming a checkpoint into Stage II).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a query/gallery pair.
    Eval(EvalArgs),
    /// Embed a dataset with a checkpoint and write aggregated anchors.
    ExportAnchors(ExportAnchorsArgs),
    /// Grid over start epoch, aggregation method, and Stage-II losses.
    Ablate(AblateArgs),
    /// Seed-variance comparison: anchor pipeline vs parametric centers.
    Variance(VarianceArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Directory for train.txt, query.txt, gallery.txt
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = crate::data::BENCHMARK_CLASSES)]
    pub classes: usize,
    #[arg(long, default_value_t = crate::data::BENCHMARK_INPUT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = crate::data::BENCHMARK_TRAIN_PER_CLASS)]
    pub train_per_class: usize,
    /// Samples per class carved off for the query/gallery pool
    #[arg(long, default_value_t = crate::data::BENCHMARK_HELDOUT_PER_CLASS)]
    pub heldout_per_class: usize,
    #[arg(long, default_value_t = crate::data::BENCHMARK_QUERIES_PER_CLASS)]
    pub queries_per_class: usize,
    #[arg(long, default_value_t = crate::data::BENCHMARK_CLUSTER_SPREAD)]
    pub cluster_spread: f64,
    #[arg(long, default_value_t = crate::data::BENCHMARK_CENTER_SPREAD)]
    pub center_spread: f64,
    /// Trailing dimensions that carry no class signal
    #[arg(long, default_value_t = crate::data::BENCHMARK_NOISE_DIMS)]
    pub noise_dims: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Query dataset for periodic evaluation (needs --gallery)
    #[arg(long, requires = "gallery")]
    pub query: Option<PathBuf>,
    #[arg(long, requires = "query")]
    pub gallery: Option<PathBuf>,
    /// Directory for manifest.json, train_log.jsonl, and checkpoints
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON training config; flags below override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from this checkpoint at its recorded epoch
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Treat the checkpoint's epoch as e_start and run Stage II only
    #[arg(long, requires = "from")]
    pub stage2_only: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// Config fields exposed as flags. Everything else comes from the JSON file.
#[derive(Args, Debug, Default)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub e_start: Option<usize>,
    #[arg(long)]
    pub e_end: Option<usize>,
    /// average | weighted
    #[arg(long)]
    pub aggregation: Option<String>,
    /// fixed | epoch | iteration
    #[arg(long)]
    pub schedule: Option<String>,
    /// Comma list of cls, triplet, center
    #[arg(long)]
    pub stage1_loss: Option<String>,
    /// Comma list of cls, triplet, anchor, triplet-anchor, center
    #[arg(long)]
    pub stage2_loss: Option<String>,
    /// Margin of the triplet-anchor loss
    #[arg(long)]
    pub margin: Option<f64>,
    /// Margin of the batch-hard triplet loss
    #[arg(long)]
    pub triplet_margin: Option<f64>,
    /// l2 | sql2
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub feat_dim: Option<usize>,
    /// Comma list, e.g. 32,32
    #[arg(long)]
    pub hidden_dims: Option<String>,
    /// Train the signed (unhinged) triplet-anchor objective
    #[arg(long)]
    pub signed_triplet_anchor: bool,
    /// Drop the normalization layer between embedding and classifier
    #[arg(long)]
    pub no_neck: bool,
    /// Restart the learning-rate schedule when Stage II begins
    #[arg(long)]
    pub lr_reset_at_stage2: bool,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// l2 | sql2
    #[arg(long, default_value = "l2")]
    pub metric: String,
    /// Comma list of rank cutoffs
    #[arg(long, default_value = "1,5,10")]
    pub ks: String,
    /// Drop gallery items sharing the query's class and group
    #[arg(long)]
    pub exclude_same_group: bool,
    /// Also write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportAnchorsArgs {
    /// Model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset to embed and aggregate
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// average | weighted
    #[arg(long, default_value = "average")]
    pub aggregation: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// CSV output path
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma list of Stage-II start epochs
    #[arg(long, default_value = "0,20,40")]
    pub e_starts: String,
    /// Comma list of aggregation methods
    #[arg(long, default_value = "average,weighted")]
    pub aggregations: String,
    /// Comma list of '+'-joined Stage-II loss sets
    #[arg(long, default_value = "cls+anchor,cls+triplet-anchor")]
    pub loss_sets: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent training runs (default: available cores)
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct VarianceArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// CSV output path (variant,seed,rank1,mAP)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Independent runs per variant, seeds 0..n
    #[arg(long, default_value_t = 12)]
    pub seeds: usize,
    /// Concurrent training runs (default: available cores)
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Reproducibility record written into the output directory before training
/// starts; `ended_unix` is filled in by a final rewrite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub config: TrainConfig,
    /// Fingerprint of the resolved config; checkpoints carry the same value.
    pub config_hash: String,
    pub started_unix: u64,
    pub ended_unix: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportAnchors(args) => cmd_export_anchors(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Variance(args) => cmd_variance(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        input_dim: args.dim,
        per_class: args.train_per_class + args.heldout_per_class,
        cluster_spread: args.cluster_spread,
        center_spread: args.center_spread,
        noise_dims: args.noise_dims,
        seed: args.seed,
    };
    let (train, query, gallery) =
        benchmark_splits(&spec, args.heldout_per_class, args.queries_per_class)?;
    std::fs::create_dir_all(&args.out_dir)?;
    for (name, d) in [("train", &train), ("query", &query), ("gallery", &gallery)] {
        let path = args.out_dir.join(format!("{name}.txt"));
        write_dataset(d, &path)?;
        println!("{} samples -> {}", d.len(), path.display());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args.overrides)?;

    let train_set = read_dataset(&args.data)?;
    let eval_pair = match (&args.query, &args.gallery) {
        (Some(q), Some(g)) => Some((read_dataset(q)?, read_dataset(g)?)),
        _ => None,
    };

    let (model, start_epoch) = match &args.from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if args.stage2_only {
                cfg.e_start = ckpt.epoch;
            }
            (Some(ckpt.model), ckpt.epoch)
        }
        None => (None, 0),
    };
    cfg.validate()?;

    let config_hash = config_fingerprint(&cfg)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let manifest_path = args.out_dir.join("manifest.json");
    let log_path = args.out_dir.join("train_log.jsonl");
    let model_path = args.out_dir.join("model.ckpt");
    let stage1_path = args.out_dir.join("stage1.ckpt");
    let anchors_path = args.out_dir.join("anchors.txt");

    let mut inputs = BTreeMap::new();
    inputs.insert("train".into(), args.data.display().to_string());
    if let (Some(q), Some(g)) = (&args.query, &args.gallery) {
        inputs.insert("query".into(), q.display().to_string());
        inputs.insert("gallery".into(), g.display().to_string());
    }
    if let Some(f) = &args.from {
        inputs.insert("resume_from".into(), f.display().to_string());
    }
    let mut outputs = BTreeMap::new();
    outputs.insert("train_log".into(), log_path.display().to_string());
    outputs.insert("model".into(), model_path.display().to_string());

    let mut manifest = RunManifest {
        command: "train".into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        config_hash: config_hash.clone(),
        started_unix: unix_now(),
        ended_unix: None,
        inputs,
        outputs,
    };
    write_manifest(&manifest, &manifest_path)?;

    let eval_ref = eval_pair.as_ref().map(|(q, g)| (q, g));
    let outcome: TrainOutcome = match model {
        Some(m) => train_from(&cfg, &train_set, eval_ref, m, start_epoch)?,
        None => crate::trainer::train(&cfg, &train_set, eval_ref)?,
    };

    outcome.log.write_jsonl(&log_path)?;
    save_checkpoint(&outcome.model, cfg.e_end, &config_hash, &model_path)?;
    if let Some(s1) = &outcome.stage1_model {
        save_checkpoint(s1, cfg.e_start, &config_hash, &stage1_path)?;
        manifest
            .outputs
            .insert("stage1_model".into(), stage1_path.display().to_string());
    }
    if let Some(anchors) = &outcome.anchors {
        write_anchors(anchors, &anchors_path)?;
        manifest
            .outputs
            .insert("anchors".into(), anchors_path.display().to_string());
    }

    for (epoch, prev, cur) in outcome.log.stage2_intra_regressions(0.05) {
        eprintln!(
            "warning: intra-class spread grew {prev:.4} -> {cur:.4} at epoch {epoch} \
             (beyond the 5% band)"
        );
    }

    manifest.ended_unix = Some(unix_now());
    write_manifest(&manifest, &manifest_path)?;

    println!(
        "trained epochs {}..{} ({} stage-2)",
        start_epoch,
        cfg.e_end,
        cfg.e_end.saturating_sub(cfg.e_start.max(start_epoch))
    );
    if let Some((epoch, snap)) = outcome.log.final_eval() {
        println!(
            "eval at epoch {epoch}: rank1 {:.4}, mAP {:.4}",
            snap.rank1, snap.map
        );
    }
    for (name, path) in &manifest.outputs {
        println!("{name}: {path}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let query = read_dataset(&args.query)?;
    let gallery = read_dataset(&args.gallery)?;
    let metric = parse_metric(&args.metric)?;
    let ks = parse_usize_list(&args.ks, "ks")?;
    let report = evaluate_retrieval(
        &ckpt.model,
        &query,
        &gallery,
        metric,
        &ks,
        args.exclude_same_group,
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &args.out {
        crate::util::write_atomic(out, format!("{json}\n").as_bytes())?;
    }
    Ok(())
}

fn cmd_export_anchors(args: ExportAnchorsArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let data = read_dataset(&args.data)?;
    let method = parse_aggregation(&args.aggregation)?;
    let set = match method {
        AggregationMethod::Average => {
            let emb = ckpt.model.embed_dataset(&data, EMBED_BATCH)?;
            aggregate_average(&emb, ckpt.epoch)?
        }
        AggregationMethod::Weighted => {
            let (emb, probs) = ckpt.model.embed_dataset_with_probs(&data, EMBED_BATCH)?;
            aggregate_weighted(&emb, &probs, ckpt.epoch)?
        }
    };
    write_anchors(&set, &args.out)?;
    println!(
        "{} anchors ({}-dim, {}) -> {}",
        set.num_classes(),
        set.feat_dim(),
        method.as_str(),
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut base = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    let train_set = read_dataset(&args.data)?;
    let query = read_dataset(&args.query)?;
    let gallery = read_dataset(&args.gallery)?;

    let e_starts = parse_usize_list(&args.e_starts, "e-starts")?;
    let methods: Vec<AggregationMethod> = args
        .aggregations
        .split(',')
        .map(|s| parse_aggregation(s.trim()))
        .collect::<Result<_>>()?;
    let loss_sets: Vec<Vec<LossKind>> = args
        .loss_sets
        .split(',')
        .map(|s| parse_loss_set(s.trim()))
        .collect::<Result<_>>()?;

    let mut cells: Vec<TrainConfig> = Vec::new();
    for &e_start in &e_starts {
        for &method in &methods {
            for losses in &loss_sets {
                let mut cfg = base.clone();
                cfg.e_start = e_start;
                cfg.aggregation = method;
                cfg.stage2_losses = losses.clone();
                cfg.validate().map_err(|e| {
                    Error::Config(format!(
                        "cell e_start={e_start} aggregation={} losses={}: {e}",
                        method.as_str(),
                        join_losses(losses)
                    ))
                })?;
                cells.push(cfg);
            }
        }
    }

    let jobs = args.jobs.unwrap_or_else(default_jobs).max(1);
    let results = run_tasks(&cells, jobs, |cfg| -> Result<(f64, f64)> {
        let out = crate::trainer::train(cfg, &train_set, None)?;
        let report = evaluate_retrieval(&out.model, &query, &gallery, cfg.metric, &[1], false)?;
        Ok((report.rank_at[&1], report.map))
    });

    let mut csv = String::from("e_start,aggregation,stage2_losses,rank1,mAP\n");
    for (cfg, result) in cells.iter().zip(results) {
        let (rank1, map) = result?;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            cfg.e_start,
            cfg.aggregation.as_str(),
            join_losses(&cfg.stage2_losses),
            rank1,
            map
        ));
    }
    crate::util::write_atomic(&args.out, csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_variance(args: VarianceArgs) -> Result<()> {
    let base = load_config(args.config.as_deref())?;
    let train_set = read_dataset(&args.data)?;
    let query = read_dataset(&args.query)?;
    let gallery = read_dataset(&args.gallery)?;
    let jobs = args.jobs.unwrap_or_else(default_jobs).max(1);
    let report = seed_variance_experiment(
        &base,
        args.seeds,
        &[PipelineVariant::Anchor, PipelineVariant::ParametricCenter],
        &train_set,
        &query,
        &gallery,
        jobs,
    )?;
    crate::util::write_atomic(&args.out, report.to_csv().as_bytes())?;
    println!("{}", serde_json::to_string_pretty(&report.summaries)?);
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Reads a JSON [`TrainConfig`]; absent path means library defaults.
fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: invalid config: {e}", p.display())))
        }
    }
}

fn apply_overrides(cfg: &mut TrainConfig, o: &ConfigOverrides) -> Result<()> {
    if let Some(v) = o.e_start {
        cfg.e_start = v;
    }
    if let Some(v) = o.e_end {
        cfg.e_end = v;
    }
    if let Some(s) = &o.aggregation {
        cfg.aggregation = parse_aggregation(s)?;
    }
    if let Some(s) = &o.schedule {
        cfg.schedule = parse_schedule(s)?;
    }
    if let Some(s) = &o.stage1_loss {
        cfg.stage1_losses = parse_loss_list(s)?;
    }
    if let Some(s) = &o.stage2_loss {
        cfg.stage2_losses = parse_loss_list(s)?;
    }
    if let Some(v) = o.margin {
        cfg.triplet_anchor_margin = v;
    }
    if let Some(v) = o.triplet_margin {
        cfg.triplet_margin = v;
    }
    if let Some(s) = &o.metric {
        cfg.metric = parse_metric(s)?;
    }
    if let Some(v) = o.label_smoothing {
        cfg.label_smoothing = v;
    }
    if let Some(v) = o.base_lr {
        cfg.base_lr = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.feat_dim {
        cfg.feat_dim = v;
    }
    if let Some(s) = &o.hidden_dims {
        cfg.hidden_dims = parse_usize_list(s, "hidden-dims")?;
    }
    if o.signed_triplet_anchor {
        cfg.triplet_anchor_hinge = false;
    }
    if o.no_neck {
        cfg.use_neck = false;
    }
    if o.lr_reset_at_stage2 {
        cfg.lr_reset_at_stage2 = true;
    }
    if let Some(v) = o.eval_every {
        cfg.eval_every = v;
    }
    Ok(())
}

fn parse_metric(s: &str) -> Result<DistanceMetric> {
    match s {
        "l2" | "euclidean" => Ok(DistanceMetric::Euclidean),
        "sql2" | "squared_euclidean" => Ok(DistanceMetric::SquaredEuclidean),
        _ => Err(Error::Config(format!(
            "unknown metric '{s}' (expected l2 or sql2)"
        ))),
    }
}

fn parse_aggregation(s: &str) -> Result<AggregationMethod> {
    AggregationMethod::parse(s)
        .ok_or_else(|| Error::Config(format!("unknown aggregation '{s}' (average or weighted)")))
}

fn parse_schedule(s: &str) -> Result<UpdateSchedule> {
    match s {
        "fixed" => Ok(UpdateSchedule::Fixed),
        "epoch" | "per_epoch" => Ok(UpdateSchedule::PerEpoch),
        "iteration" | "per_iteration" => Ok(UpdateSchedule::PerIteration),
        _ => Err(Error::Config(format!(
            "unknown schedule '{s}' (fixed, epoch, or iteration)"
        ))),
    }
}

/// Comma-separated losses, e.g. `cls,anchor`.
fn parse_loss_list(s: &str) -> Result<Vec<LossKind>> {
    split_losses(s, ',')
}

/// '+'-separated loss set, e.g. `cls+triplet-anchor`.
fn parse_loss_set(s: &str) -> Result<Vec<LossKind>> {
    split_losses(s, '+')
}

fn split_losses(s: &str, sep: char) -> Result<Vec<LossKind>> {
    s.split(sep)
        .map(str::trim)
        .map(|tok| {
            LossKind::parse(tok).ok_or_else(|| Error::Config(format!("unknown loss '{tok}'")))
        })
        .collect()
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = s
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry '{tok}'")))
        })
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    Ok(list)
}

fn join_losses(losses: &[LossKind]) -> String {
    losses
        .iter()
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

/// Fingerprint of the resolved config, stored in manifest and checkpoints.
pub fn config_fingerprint(cfg: &TrainConfig) -> Result<String> {
    Ok(crate::util::fnv1a64_hex(
        serde_json::to_string(cfg)?.as_bytes(),
    ))
}

fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    crate::util::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
