//! Retrieval evaluation and cluster geometry.
//!
//! Retrieval follows the usual protocol: embed queries and gallery, rank
//! gallery candidates by distance (ties broken toward the lower gallery
//! index), then score rank@k and mean average precision. A query whose class
//! has no gallery candidate left is dropped from both metrics and counted in
//! `queries_skipped`. The optional same-group exclusion removes gallery
//! candidates that share both class and group with the query, mirroring the
//! camera-aware protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{EmbeddingBatch, EncoderModel};
use crate::losses::{anchor_loss, DistanceMetric};
use crate::matrix::Matrix;
use crate::trainer::{LossKind, TrainConfig};
use crate::{Error, Result};

pub const EMBED_BATCH: usize = 256;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Fraction of evaluated queries with a correct match in the top k.
    pub rank_at: BTreeMap<usize, f64>,
    pub map: f64,
    pub queries_evaluated: usize,
    /// Queries dropped because no valid same-class candidate remained.
    pub queries_skipped: usize,
    pub excluded_same_group: bool,
}

/// Embeds both sets with `model` and scores retrieval.
pub fn evaluate_retrieval(
    model: &EncoderModel,
    query: &Dataset,
    gallery: &Dataset,
    metric: DistanceMetric,
    ks: &[usize],
    exclude_same_group: bool,
) -> Result<RetrievalReport> {
    if query.num_classes != gallery.num_classes {
        return Err(Error::Shape(format!(
            "query has {} classes, gallery {}",
            query.num_classes, gallery.num_classes
        )));
    }
    let q = model.embed_dataset(query, EMBED_BATCH)?;
    let g = model.embed_dataset(gallery, EMBED_BATCH)?;
    retrieval_from_embeddings(&q, &g, metric, ks, exclude_same_group)
}

/// Retrieval scoring on already-embedded features.
pub fn retrieval_from_embeddings(
    query: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    metric: DistanceMetric,
    ks: &[usize],
    exclude_same_group: bool,
) -> Result<RetrievalReport> {
    if query.features.cols() != gallery.features.cols() {
        return Err(Error::Shape(format!(
            "query dimension {} vs gallery {}",
            query.features.cols(),
            gallery.features.cols()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("rank cutoffs must be positive".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Data("gallery is empty".into()));
    }

    let mut rank_hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;

    for qi in 0..query.len() {
        let qf = query.features.row(qi);
        let qy = query.labels[qi];
        let qg = query.groups[qi];

        let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(gallery.len());
        for gi in 0..gallery.len() {
            if exclude_same_group {
                if let (Some(a), Some(b)) = (qg, gallery.groups[gi]) {
                    if a == b && gallery.labels[gi] == qy {
                        continue;
                    }
                }
            }
            ranked.push((metric.distance(qf, gallery.features.row(gi)), gi));
        }
        ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let total_matches = ranked
            .iter()
            .filter(|&&(_, gi)| gallery.labels[gi] == qy)
            .count();
        if total_matches == 0 {
            skipped += 1;
            continue;
        }
        evaluated += 1;

        let mut found = 0usize;
        let mut ap = 0.0;
        let mut first_match_rank = usize::MAX;
        for (pos, &(_, gi)) in ranked.iter().enumerate() {
            if gallery.labels[gi] == qy {
                found += 1;
                let rank = pos + 1;
                ap += found as f64 / rank as f64;
                if first_match_rank == usize::MAX {
                    first_match_rank = rank;
                }
            }
        }
        ap_sum += ap / total_matches as f64;
        for (&k, hits) in rank_hits.iter_mut() {
            if first_match_rank <= k {
                *hits += 1;
            }
        }
    }

    if evaluated == 0 {
        return Err(Error::Data(
            "no query had a valid gallery match; nothing to evaluate".into(),
        ));
    }

    Ok(RetrievalReport {
        rank_at: rank_hits
            .into_iter()
            .map(|(k, hits)| (k, hits as f64 / evaluated as f64))
            .collect(),
        map: ap_sum / evaluated as f64,
        queries_evaluated: evaluated,
        queries_skipped: skipped,
        excluded_same_group: exclude_same_group,
    })
}

/// Compactness summary of an embedded set against an anchor matrix.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Mean distance of each sample to its class anchor.
    pub mean_intra: f64,
    /// Mean pairwise distance between distinct anchors.
    pub mean_inter: f64,
    /// `mean_intra / mean_inter`; small is tight.
    pub ratio: f64,
}

pub fn cluster_stats(
    emb: &EmbeddingBatch,
    anchors: &Matrix,
    metric: DistanceMetric,
) -> Result<ClusterStats> {
    let c = anchors.rows();
    if c < 2 {
        return Err(Error::Data("cluster stats need at least 2 classes".into()));
    }
    // mean_intra is exactly the anchor loss value over the embedding.
    let mean_intra = anchor_loss(&emb.features, &emb.labels, anchors, metric)?.value;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for j in 0..c {
        for k in (j + 1)..c {
            inter += metric.distance(anchors.row(j), anchors.row(k));
            pairs += 1;
        }
    }
    let mean_inter = inter / pairs as f64;
    Ok(ClusterStats {
        mean_intra,
        mean_inter,
        ratio: mean_intra / mean_inter,
    })
}

/// The two pipelines whose seed-to-seed spread gets compared: non-parametric
/// anchors (two-stage) versus learnable centers trained jointly throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineVariant {
    Anchor,
    ParametricCenter,
}

impl PipelineVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineVariant::Anchor => "anchor",
            PipelineVariant::ParametricCenter => "parametric_center",
        }
    }

    /// Training config for this variant at a given seed. The anchor pipeline
    /// is the base config as-is; the center baseline swaps both stages for
    /// joint `{cls, triplet, center}` training, so its per-seed variation
    /// includes the random center initialization.
    pub fn config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        if self == PipelineVariant::ParametricCenter {
            let joint = vec![LossKind::Classification, LossKind::Triplet, LossKind::Center];
            cfg.stage1_losses = joint.clone();
            cfg.stage2_losses = joint;
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceRow {
    pub variant: PipelineVariant,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
}

/// Spread statistics of one variant across seeds; `std_*` is the sample
/// standard deviation (n-1 denominator).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: PipelineVariant,
    pub runs: usize,
    pub mean_rank1: f64,
    pub std_rank1: f64,
    pub min_rank1: f64,
    pub max_rank1: f64,
    pub mean_map: f64,
    pub std_map: f64,
    pub min_map: f64,
    pub max_map: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
    pub summaries: Vec<VariantSummary>,
}

impl VarianceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,rank1,mAP\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.variant.as_str(),
                r.seed,
                r.rank1,
                r.map
            ));
        }
        out
    }

    pub fn summary_for(&self, variant: PipelineVariant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }
}

/// Trains every variant once per seed `0..n_seeds` on a fixed dataset and
/// scores the final model on the query/gallery pair. Runs are independent, so
/// up to `jobs` of them execute concurrently; results come back in the fixed
/// (variant, seed) order regardless.
pub fn seed_variance_experiment(
    base_cfg: &TrainConfig,
    n_seeds: usize,
    variants: &[PipelineVariant],
    train_set: &Dataset,
    query: &Dataset,
    gallery: &Dataset,
    jobs: usize,
) -> Result<VarianceReport> {
    if n_seeds < 2 {
        return Err(Error::Config(format!(
            "variance needs at least 2 seeds, got {n_seeds}"
        )));
    }
    if variants.is_empty() {
        return Err(Error::Config("no variants to run".into()));
    }
    base_cfg.validate()?;

    let tasks: Vec<(PipelineVariant, u64)> = variants
        .iter()
        .flat_map(|&v| (0..n_seeds as u64).map(move |s| (v, s)))
        .collect();
    let results: Vec<Result<VarianceRow>> = run_tasks(&tasks, jobs.max(1), |&(variant, seed)| {
        let cfg = variant.config(base_cfg, seed);
        let run = || -> Result<VarianceRow> {
            let out = crate::trainer::train(&cfg, train_set, None)?;
            let report =
                evaluate_retrieval(&out.model, query, gallery, cfg.metric, &[1], false)?;
            Ok(VarianceRow {
                variant,
                seed,
                rank1: report.rank_at[&1],
                map: report.map,
            })
        };
        run().map_err(|e| tag_run_error(e, variant, seed))
    });

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    let summaries = variants
        .iter()
        .map(|&v| summarize(v, &rows))
        .collect();
    Ok(VarianceReport { rows, summaries })
}

/// Runs `work` over `tasks` on up to `jobs` threads, returning results in
/// task order.
pub(crate) fn run_tasks<T: Sync, R: Send>(
    tasks: &[T],
    jobs: usize,
    work: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let slots: Vec<Mutex<Option<R>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let r = work(&tasks[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every task ran"))
        .collect()
}

/// Tags a run failure with which variant and seed produced it.
fn tag_run_error(e: Error, variant: PipelineVariant, seed: u64) -> Error {
    let tag = format!("{} seed {seed}", variant.as_str());
    match e {
        Error::TrainingAbort {
            epoch,
            iteration,
            msg,
        } => Error::TrainingAbort {
            epoch,
            iteration,
            msg: format!("[{tag}] {msg}"),
        },
        other => Error::Data(format!("[{tag}] {other}")),
    }
}

fn summarize(variant: PipelineVariant, rows: &[VarianceRow]) -> VariantSummary {
    let picked: Vec<&VarianceRow> = rows.iter().filter(|r| r.variant == variant).collect();
    let n = picked.len();
    let stat = |get: fn(&VarianceRow) -> f64| -> (f64, f64, f64, f64) {
        let mean = picked.iter().map(|r| get(r)).sum::<f64>() / n as f64;
        let var = if n > 1 {
            picked.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let min = picked.iter().map(|r| get(r)).fold(f64::INFINITY, f64::min);
        let max = picked
            .iter()
            .map(|r| get(r))
            .fold(f64::NEG_INFINITY, f64::max);
        (mean, var.sqrt(), min, max)
    };
    let (mean_rank1, std_rank1, min_rank1, max_rank1) = stat(|r| r.rank1);
    let (mean_map, std_map, min_map, max_map) = stat(|r| r.map);
    VariantSummary {
        variant,
        runs: n,
        mean_rank1,
        std_rank1,
        min_rank1,
        max_rank1,
        mean_map,
        std_map,
        min_map,
        max_map,
    }
}
