//! Two-stage training loop.
//!
//! Stage I (epochs `[0, e_start)`) trains with conventional batch losses,
//! by default classification plus batch-hard triplet. At `e_start` the full
//! training set is embedded and aggregated into class anchors, and Stage II
//! (epochs `[e_start, e_end)`) switches to the anchor-based loss set, with
//! anchors refreshed per the configured schedule. Everything is driven by a
//! single seed: model init, batch sampling, and center init are all ChaCha8
//! streams derived from it, so a config determines the run bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{
    aggregate_average, aggregate_weighted, ema_update, schedule_should_update, AggregationMethod,
    AnchorSet, SchedulePhase, UpdateSchedule,
};
use crate::data::Dataset;
use crate::encoder::{EncoderModel, ForwardMode, GradientSet};
use crate::eval::{evaluate_retrieval, EMBED_BATCH};
use crate::losses::{
    anchor_loss, batch_hard_triplet, cross_entropy_ls, parametric_center_loss,
    triplet_anchor_loss_with, CenterBank, DistanceMetric, LossOutput,
};
use crate::matrix::Matrix;
use crate::sampler::{pk_epoch, PKSpec};
use crate::{Error, Result};

/// Offset mixed into the run seed for the center-bank initialization stream,
/// so centers do not reuse the model-init draw.
const CENTER_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(rename = "cls")]
    Classification,
    Triplet,
    Anchor,
    TripletAnchor,
    Center,
}

impl LossKind {
    /// Key used in config files, CLI flags, and the per-epoch loss map.
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Classification => "cls",
            LossKind::Triplet => "triplet",
            LossKind::Anchor => "anchor",
            LossKind::TripletAnchor => "triplet_anchor",
            LossKind::Center => "center",
        }
    }

    /// Accepts both underscore and hyphen spellings.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls" | "classification" => Some(LossKind::Classification),
            "triplet" => Some(LossKind::Triplet),
            "anchor" => Some(LossKind::Anchor),
            "triplet_anchor" | "triplet-anchor" => Some(LossKind::TripletAnchor),
            "center" => Some(LossKind::Center),
            _ => None,
        }
    }

    fn needs_anchors(self) -> bool {
        matches!(self, LossKind::Anchor | LossKind::TripletAnchor)
    }
}

/// Per-term weights for the summed training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub triplet: f64,
    pub anchor: f64,
    pub triplet_anchor: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            triplet: 1.0,
            anchor: 1.0,
            triplet_anchor: 1.0,
            center: 1.0,
        }
    }
}

impl LossWeights {
    pub fn for_kind(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Classification => self.cls,
            LossKind::Triplet => self.triplet,
            LossKind::Anchor => self.anchor,
            LossKind::TripletAnchor => self.triplet_anchor,
            LossKind::Center => self.center,
        }
    }

    fn all(&self) -> [f64; 5] {
        [
            self.cls,
            self.triplet,
            self.anchor,
            self.triplet_anchor,
            self.center,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDecay {
    /// Epochs at which the rate is multiplied by `factor` (cumulative).
    pub epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay {
            epochs: vec![20],
            factor: 0.15,
        }
    }
}

/// Identity-balanced batch shape: `p` classes times `k` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PkConfig {
    /// Classes per batch; capped at the dataset's class count.
    pub p: usize,
    pub k: usize,
}

impl Default for PkConfig {
    fn default() -> Self {
        PkConfig { p: 16, k: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dims: Vec<usize>,
    pub feat_dim: usize,
    pub use_neck: bool,
    /// Losses for epochs `[0, e_start)`; anchor-type losses are not allowed
    /// here (no anchors exist yet).
    pub stage1_losses: Vec<LossKind>,
    /// Losses for epochs `[e_start, e_end)`.
    pub stage2_losses: Vec<LossKind>,
    pub e_start: usize,
    pub e_end: usize,
    pub aggregation: AggregationMethod,
    pub schedule: UpdateSchedule,
    pub metric: DistanceMetric,
    pub triplet_margin: f64,
    pub triplet_anchor_margin: f64,
    /// `false` keeps the signed (unhinged) triplet-anchor objective.
    pub triplet_anchor_hinge: bool,
    pub label_smoothing: f64,
    pub weights: LossWeights,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear ramp from `base_lr/10` to `base_lr` over this many epochs.
    pub warmup_epochs: usize,
    pub lr_decay: LrDecay,
    /// Restart the warmup/decay schedule when Stage II begins.
    pub lr_reset_at_stage2: bool,
    pub pk: PkConfig,
    /// Step multiplier for parametric centers relative to the model rate.
    pub center_lr_multiplier: f64,
    /// Evaluate every this many epochs (plus stage boundary and final epoch)
    /// when an eval pair is supplied.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dims: vec![32],
            feat_dim: 16,
            use_neck: true,
            stage1_losses: vec![LossKind::Classification, LossKind::Triplet],
            stage2_losses: vec![LossKind::Classification, LossKind::Anchor],
            e_start: 40,
            e_end: 60,
            aggregation: AggregationMethod::Average,
            schedule: UpdateSchedule::PerEpoch,
            metric: DistanceMetric::Euclidean,
            triplet_margin: 0.3,
            triplet_anchor_margin: 0.0,
            triplet_anchor_hinge: true,
            label_smoothing: 0.1,
            weights: LossWeights::default(),
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 5,
            lr_decay: LrDecay::default(),
            lr_reset_at_stage2: false,
            pk: PkConfig::default(),
            center_lr_multiplier: 0.5,
            eval_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.e_start >= self.e_end {
            return fail(format!(
                "e_start {} must be below e_end {}",
                self.e_start, self.e_end
            ));
        }
        if self.stage1_losses.is_empty() || self.stage2_losses.is_empty() {
            return fail("each stage needs at least one loss".into());
        }
        if let Some(k) = self.stage1_losses.iter().find(|k| k.needs_anchors()) {
            return fail(format!(
                "stage 1 cannot use '{}': anchors are first aggregated at e_start",
                k.as_str()
            ));
        }
        if self.feat_dim == 0 || self.hidden_dims.contains(&0) {
            return fail("layer dimensions must be positive".into());
        }
        if self.weights.all().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail("loss weights must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if !self.triplet_margin.is_finite() || !self.triplet_anchor_margin.is_finite() {
            return fail("margins must be finite".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.lr_decay.factor.is_finite()
            && self.lr_decay.factor > 0.0
            && self.lr_decay.factor <= 1.0)
        {
            return fail(format!(
                "lr_decay.factor {} outside (0, 1]",
                self.lr_decay.factor
            ));
        }
        if self.pk.p < 2 || self.pk.k < 2 {
            return fail(format!(
                "pk batches need p >= 2 and k >= 2, got {}x{}",
                self.pk.p, self.pk.k
            ));
        }
        if !(self.center_lr_multiplier.is_finite() && self.center_lr_multiplier >= 0.0) {
            return fail(format!(
                "center_lr_multiplier {} must be >= 0",
                self.center_lr_multiplier
            ));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        Ok(())
    }

    fn uses_center(&self) -> bool {
        self.stage1_losses.contains(&LossKind::Center)
            || self.stage2_losses.contains(&LossKind::Center)
    }

    fn stage2_needs_anchors(&self) -> bool {
        self.stage2_losses.iter().any(|k| k.needs_anchors())
    }
}

/// Learning rate at `epoch`: linear warmup from `base_lr/10`, then step
/// decay. With `lr_reset_at_stage2` the schedule restarts at `e_start`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let epoch = if cfg.lr_reset_at_stage2 && epoch >= cfg.e_start {
        epoch - cfg.e_start
    } else {
        epoch
    };
    let base = cfg.base_lr;
    let ramped = if epoch < cfg.warmup_epochs {
        let t = epoch as f64 / cfg.warmup_epochs as f64;
        base / 10.0 + (base - base / 10.0) * t
    } else {
        base
    };
    let decays = cfg.lr_decay.epochs.iter().filter(|&&e| epoch >= e).count();
    ramped * cfg.lr_decay.factor.powi(decays as i32)
}

/// Momentum SGD with standard L2 weight decay folded into the gradient:
/// `v <- momentum*v + (g + wd*p)`, `p <- p - lr*v`. Center vectors carry
/// their own velocity and rate multiplier and are not decayed.
pub struct Optimizer {
    velocity: Vec<f64>,
    center_velocity: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
}

impl Optimizer {
    pub fn new(model: &EncoderModel, momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            velocity: vec![0.0; model.num_params()],
            center_velocity: Vec::new(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut EncoderModel, grads: &GradientSet, lr: f64) {
        for (idx, v) in self.velocity.iter_mut().enumerate() {
            let p = model.param_mut(idx);
            *v = self.momentum * *v + grads.param(idx) + self.weight_decay * *p;
            *p -= lr * *v;
        }
    }

    pub fn step_centers(&mut self, bank: &mut CenterBank, grad: &Matrix, lr: f64) {
        if self.center_velocity.is_empty() {
            self.center_velocity = vec![0.0; bank.centers.data().len()];
        }
        let rate = lr * bank.lr_multiplier;
        for ((p, &g), v) in bank
            .centers
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.center_velocity.iter_mut())
        {
            *v = self.momentum * *v + g;
            *p -= rate * *v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    /// Epoch means of each active loss term, plus `total` (weighted sum) and,
    /// at stage ends that measure it, `train_intra`.
    pub losses: BTreeMap<String, f64>,
    pub anchors_updated: bool,
    pub eval: Option<EvalSnapshot>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(TrainLog { records })
    }

    /// Last record carrying an eval snapshot.
    pub fn final_eval(&self) -> Option<(usize, EvalSnapshot)> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.eval.map(|e| (r.epoch, e)))
    }

    /// `train_intra` value logged at the end of Stage I (the stage-boundary
    /// record), if the run measured it.
    pub fn stage1_end_intra(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == 1)
            .filter_map(|r| r.losses.get("train_intra").copied())
            .next_back()
    }

    /// Consecutive Stage-II `train_intra` increases beyond `tol` (fraction,
    /// e.g. 0.05): returns `(epoch, previous, current)` per violation. The
    /// intra-class spread should shrink as anchors pull clusters together;
    /// growth outside the tolerance band marks a run worth inspecting.
    pub fn stage2_intra_regressions(&self, tol: f64) -> Vec<(usize, f64, f64)> {
        let seq: Vec<(usize, f64)> = self
            .records
            .iter()
            .filter(|r| r.stage == 2)
            .filter_map(|r| r.losses.get("train_intra").map(|&v| (r.epoch, v)))
            .collect();
        seq.windows(2)
            .filter(|w| w[1].1 > w[0].1 * (1.0 + tol))
            .map(|w| (w[1].0, w[0].1, w[1].1))
            .collect()
    }
}

/// Everything a finished run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    /// Snapshot taken at the end of epoch `e_start - 1`, before any anchor
    /// training; present when the run crossed the stage boundary.
    pub stage1_model: Option<EncoderModel>,
    pub log: TrainLog,
    /// Final anchor state, when Stage II used anchors.
    pub anchors: Option<AnchorSet>,
    /// Final center bank, when any stage used the parametric center loss.
    pub centers: Option<CenterBank>,
}

/// Trains from a fresh seeded model. See [`train_from`].
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_pair: Option<(&Dataset, &Dataset)>,
) -> Result<TrainOutcome> {
    let model = EncoderModel::init(
        train_set.input_dim,
        &cfg.hidden_dims,
        cfg.feat_dim,
        train_set.num_classes,
        cfg.use_neck,
        cfg.seed,
    )?;
    train_from(cfg, train_set, eval_pair, model, 0)
}

/// Runs epochs `[start_epoch, e_end)` on `model`. Epochs below `e_start` use
/// `stage1_losses`; at the first Stage-II epoch the training set is embedded
/// and aggregated into anchors, which the schedule then keeps fresh. Resuming
/// a Stage-I checkpoint directly into Stage II is `start_epoch == e_start`.
/// Momentum starts cold at `start_epoch`: velocity is not part of snapshots.
pub fn train_from(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_pair: Option<(&Dataset, &Dataset)>,
    mut model: EncoderModel,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if start_epoch >= cfg.e_end {
        return Err(Error::Config(format!(
            "start epoch {} is not below e_end {}",
            start_epoch, cfg.e_end
        )));
    }
    if model.input_dim != train_set.input_dim || model.num_classes != train_set.num_classes {
        return Err(Error::Shape(format!(
            "model ({} inputs, {} classes) does not fit dataset ({} inputs, {} classes)",
            model.input_dim, model.num_classes, train_set.input_dim, train_set.num_classes
        )));
    }
    let counts = train_set.class_counts();
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {j} has no training samples")));
    }

    let pk = PKSpec {
        p: cfg.pk.p.min(train_set.num_classes),
        k: cfg.pk.k,
        seed: cfg.seed,
    };
    let mut opt = Optimizer::new(&model, cfg.momentum, cfg.weight_decay);
    let mut centers = cfg.uses_center().then(|| {
        CenterBank::init_random(
            train_set.num_classes,
            cfg.feat_dim,
            cfg.center_lr_multiplier,
            cfg.seed.wrapping_add(CENTER_SEED_SALT),
        )
    });
    let mut anchors: Option<AnchorSet> = None;
    let mut stage1_model = None;
    let mut log = TrainLog::default();

    for epoch in start_epoch..cfg.e_end {
        let stage2 = epoch >= cfg.e_start;
        let active = if stage2 {
            &cfg.stage2_losses
        } else {
            &cfg.stage1_losses
        };
        let mut anchors_updated = false;

        // Entering Stage II: seed anchors from the full training set. Every
        // schedule starts from this aggregation.
        if stage2 && anchors.is_none() && cfg.stage2_needs_anchors() {
            debug_assert!(schedule_should_update(
                cfg.schedule,
                SchedulePhase::Stage2Start,
                epoch,
                cfg.e_start
            ));
            anchors = Some(aggregate(cfg, &model, train_set, epoch)?);
            anchors_updated = true;
        }

        let lr = lr_at(cfg, epoch);
        let batches = pk_epoch(train_set, &pk, epoch)?;
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut total_sum = 0.0;

        for (iteration, batch) in batches.iter().enumerate() {
            let (x, y) = gather_batch(train_set, batch);
            let cache = model.forward(&x, ForwardMode::Training)?;

            let m = batch.len();
            let mut total = 0.0;
            let mut d_feat: Option<Matrix> = None;
            let mut d_logits: Option<Matrix> = None;
            let mut d_centers: Option<Matrix> = None;
            for &kind in active {
                let out: LossOutput = match kind {
                    LossKind::Classification => {
                        cross_entropy_ls(&cache.logits, &y, cfg.label_smoothing)?
                    }
                    LossKind::Triplet => {
                        batch_hard_triplet(&cache.features, &y, cfg.triplet_margin, cfg.metric)?
                    }
                    LossKind::Anchor => {
                        let set = anchors.as_ref().expect("stage 2 aggregated anchors");
                        anchor_loss(&cache.features, &y, &set.anchors, cfg.metric)?
                    }
                    LossKind::TripletAnchor => {
                        let set = anchors.as_ref().expect("stage 2 aggregated anchors");
                        triplet_anchor_loss_with(
                            &cache.features,
                            &y,
                            &set.anchors,
                            cfg.triplet_anchor_margin,
                            cfg.metric,
                            cfg.triplet_anchor_hinge,
                        )?
                    }
                    LossKind::Center => {
                        parametric_center_loss(&cache.features, &y, centers.as_ref().unwrap())?
                    }
                };
                let w = cfg.weights.for_kind(kind);
                total += w * out.value;
                *sums.entry(kind.as_str()).or_insert(0.0) += out.value;
                match kind {
                    LossKind::Classification => {
                        accumulate(&mut d_logits, &out.grad_inputs, w, m, cache.logits.cols())
                    }
                    _ => accumulate(&mut d_feat, &out.grad_inputs, w, m, cfg.feat_dim),
                }
                if let Some(gc) = &out.grad_centers {
                    accumulate(
                        &mut d_centers,
                        gc,
                        w,
                        gc.rows(),
                        gc.cols(),
                    );
                }
            }

            if !total.is_finite() {
                return Err(Error::TrainingAbort {
                    epoch,
                    iteration,
                    msg: format!("non-finite loss {total}"),
                });
            }
            total_sum += total;

            let grads = model.backward(&cache, d_feat.as_ref(), d_logits.as_ref())?;
            model.update_running_stats(&cache);
            opt.step(&mut model, &grads, lr);
            if let (Some(bank), Some(gc)) = (centers.as_mut(), d_centers.as_ref()) {
                opt.step_centers(bank, gc, lr);
            }

            if stage2
                && schedule_should_update(
                    cfg.schedule,
                    SchedulePhase::IterationEnd,
                    epoch,
                    cfg.e_start,
                )
            {
                if let Some(set) = anchors.as_mut() {
                    // Streamed update from this batch's features (the forward
                    // that produced the gradients, pre-step).
                    ema_update(set, &cache.features, &y)?;
                    anchors_updated = true;
                }
            }
        }

        let iters = batches.len() as f64;
        let mut losses: BTreeMap<String, f64> = sums
            .into_iter()
            .map(|(k, v)| (k.to_string(), v / iters))
            .collect();
        losses.insert("total".into(), total_sum / iters);

        // Epoch-end bookkeeping over the full training embedding: per-epoch
        // re-aggregation, and the intra-class spread measured against fresh
        // mean anchors at the stage boundary and through Stage II.
        let boundary = epoch + 1 == cfg.e_start;
        let refresh = stage2
            && anchors.is_some()
            && schedule_should_update(cfg.schedule, SchedulePhase::EpochEnd, epoch, cfg.e_start);
        if boundary || stage2 || refresh {
            let (emb, probs) = model.embed_dataset_with_probs(train_set, EMBED_BATCH)?;
            if refresh {
                let mut set = match cfg.aggregation {
                    AggregationMethod::Average => aggregate_average(&emb, epoch)?,
                    AggregationMethod::Weighted => aggregate_weighted(&emb, &probs, epoch)?,
                };
                set.provenance.schedule = Some(cfg.schedule);
                anchors = Some(set);
                anchors_updated = true;
            }
            let mean_anchors = aggregate_average(&emb, epoch)?;
            let intra = anchor_loss(
                &emb.features,
                &emb.labels,
                &mean_anchors.anchors,
                cfg.metric,
            )?
            .value;
            losses.insert("train_intra".into(), intra);
        }

        let last = epoch + 1 == cfg.e_end;
        let eval = match eval_pair {
            Some((query, gallery))
                if (epoch + 1) % cfg.eval_every == 0 || last || boundary =>
            {
                let report =
                    evaluate_retrieval(&model, query, gallery, cfg.metric, &[1], false)?;
                Some(EvalSnapshot {
                    rank1: report.rank_at[&1],
                    map: report.map,
                })
            }
            _ => None,
        };

        log.records.push(EpochRecord {
            epoch,
            stage: if stage2 { 2 } else { 1 },
            lr,
            losses,
            anchors_updated,
            eval,
        });

        if boundary {
            stage1_model = Some(model.clone());
        }
    }

    Ok(TrainOutcome {
        model,
        stage1_model,
        log,
        anchors,
        centers,
    })
}

/// Full-dataset anchor aggregation under the configured method.
fn aggregate(
    cfg: &TrainConfig,
    model: &EncoderModel,
    train_set: &Dataset,
    epoch: usize,
) -> Result<AnchorSet> {
    let mut set = match cfg.aggregation {
        AggregationMethod::Average => {
            let emb = model.embed_dataset(train_set, EMBED_BATCH)?;
            aggregate_average(&emb, epoch)?
        }
        AggregationMethod::Weighted => {
            let (emb, probs) = model.embed_dataset_with_probs(train_set, EMBED_BATCH)?;
            aggregate_weighted(&emb, &probs, epoch)?
        }
    };
    set.provenance.schedule = Some(cfg.schedule);
    Ok(set)
}

fn gather_batch(d: &Dataset, idxs: &[usize]) -> (Matrix, Vec<usize>) {
    let mut x = Matrix::zeros(idxs.len(), d.input_dim);
    let mut y = Vec::with_capacity(idxs.len());
    for (r, &i) in idxs.iter().enumerate() {
        x.row_mut(r).copy_from_slice(&d.samples[i].x);
        y.push(d.samples[i].y);
    }
    (x, y)
}

/// `acc += w * grad`, creating the accumulator on first use.
fn accumulate(acc: &mut Option<Matrix>, grad: &Matrix, w: f64, rows: usize, cols: usize) {
    let target = acc.get_or_insert_with(|| Matrix::zeros(rows, cols));
    for (a, &g) in target.data_mut().iter_mut().zip(grad.data()) {
        *a += w * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_query_gallery, SyntheticSpec};

    fn tiny_dataset(seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            input_dim: 4,
            per_class: 8,
            cluster_spread: 0.4,
            center_spread: 2.0,
            noise_dims: 1,
            seed,
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden_dims: vec![8],
            feat_dim: 4,
            e_start: 2,
            e_end: 4,
            warmup_epochs: 1,
            lr_decay: LrDecay {
                epochs: vec![3],
                factor: 0.1,
            },
            pk: PkConfig { p: 2, k: 2 },
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_hand_values() {
        let cfg = TrainConfig {
            base_lr: 0.01,
            warmup_epochs: 10,
            lr_decay: LrDecay {
                epochs: vec![20, 40],
                factor: 0.1,
            },
            lr_reset_at_stage2: false,
            e_start: 40,
            e_end: 60,
            ..TrainConfig::default()
        };
        assert!((lr_at(&cfg, 0) - 0.001).abs() < 1e-15, "ramp start");
        assert!((lr_at(&cfg, 10) - 0.01).abs() < 1e-15, "ramp end");
        assert!((lr_at(&cfg, 5) - 0.0055).abs() < 1e-15, "mid ramp");
        assert!((lr_at(&cfg, 25) - 0.001).abs() < 1e-15, "one decay");
        assert!((lr_at(&cfg, 45) - 0.0001).abs() < 1e-15, "two decays");

        let reset = TrainConfig {
            lr_reset_at_stage2: true,
            ..cfg
        };
        assert!((lr_at(&reset, 40) - 0.001).abs() < 1e-15, "fresh ramp at stage 2");
        assert!((lr_at(&reset, 50) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn optimizer_two_step_hand_values() {
        // Single 1x1 layer, no neck: params are [w, b, classifier...].
        let mut model = EncoderModel::init(1, &[], 1, 2, false, 3).unwrap();
        *model.param_mut(0) = 1.0;
        let mut opt = Optimizer::new(&model, 0.9, 0.1);
        let mut grads = GradientSet::zeros_like(&model);
        grads.layers[0].w.set(0, 0, 0.5);

        // v = 0.5 + 0.1*1.0 = 0.6, p = 1 - 0.1*0.6 = 0.94
        let others: Vec<f64> = (1..model.num_params()).map(|i| model.param(i)).collect();
        opt.step(&mut model, &grads, 0.1);
        assert!((model.param(0) - 0.94).abs() < 1e-15);

        // Zero-grad params shrink by the decay path alone: v = wd*p.
        for (i, &before) in others.iter().enumerate() {
            let want = before - 0.1 * (0.1 * before);
            assert!((model.param(i + 1) - want).abs() < 1e-15);
        }

        // Second step, gradient gone: v = 0.9*0.6 + 0.1*0.94 = 0.634,
        // p = 0.94 - 0.0634 = 0.8766.
        grads.layers[0].w.set(0, 0, 0.0);
        opt.step(&mut model, &grads, 0.1);
        assert!((model.param(0) - 0.8766).abs() < 1e-15);
    }

    #[test]
    fn center_step_uses_multiplier_and_skips_decay() {
        let model = EncoderModel::init(1, &[], 2, 2, false, 3).unwrap();
        let mut opt = Optimizer::new(&model, 0.5, 0.1);
        let mut bank = CenterBank::init_random(1, 2, 0.5, 9);
        bank.centers.set(0, 0, 2.0);
        bank.centers.set(0, 1, 0.0);
        let mut g = Matrix::zeros(1, 2);
        g.set(0, 0, 1.0);

        // v = 1, step = lr*mult*v = 0.1*0.5 = 0.05.
        opt.step_centers(&mut bank, &g, 0.1);
        assert!((bank.centers.get(0, 0) - 1.95).abs() < 1e-15);
        // No weight decay: the zero-gradient coordinate holds still.
        assert_eq!(bank.centers.get(0, 1), 0.0);
        // Momentum carries: v = 0.5*1 + 1 = 1.5, step 0.075.
        opt.step_centers(&mut bank, &g, 0.1);
        assert!((bank.centers.get(0, 0) - 1.875).abs() < 1e-15);
    }

    #[test]
    fn two_stage_run_logs_the_protocol() {
        let data = tiny_dataset(11);
        let (query, gallery) = split_query_gallery(&data, 2, 5).unwrap();
        let cfg = tiny_config();
        let out = train(&cfg, &data, Some((&query, &gallery))).unwrap();

        let recs = &out.log.records;
        assert_eq!(recs.len(), 4);
        assert_eq!(
            recs.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            recs.iter().map(|r| r.stage).collect::<Vec<_>>(),
            vec![1, 1, 2, 2]
        );
        // Stage-I epochs train cls+triplet, no anchor events.
        assert!(recs[0].losses.contains_key("cls") && recs[0].losses.contains_key("triplet"));
        assert!(!recs[0].anchors_updated && !recs[1].anchors_updated);
        // Stage II aggregates at entry and per epoch end.
        assert!(recs[2].anchors_updated && recs[3].anchors_updated);
        assert!(recs[2].losses.contains_key("anchor"));
        assert!(!recs[2].losses.contains_key("triplet"));
        // Boundary + every Stage-II epoch measure the intra spread.
        assert!(!recs[0].losses.contains_key("train_intra"));
        assert!(recs[1].losses.contains_key("train_intra"));
        assert!(recs[2].losses.contains_key("train_intra"));
        // Eval cadence: (e+1) % 2 == 0 or boundary or last -> 1, 2(boundary? no,
        // boundary is epoch 1), epochs 1 and 3; epoch 2 has neither.
        assert!(recs[0].eval.is_none());
        assert!(recs[1].eval.is_some());
        assert!(recs[3].eval.is_some());
        for r in recs {
            for (k, v) in &r.losses {
                assert!(v.is_finite(), "{k} at epoch {}", r.epoch);
            }
        }
        assert!(out.stage1_model.is_some());
        let anchors = out.anchors.expect("stage 2 used anchors");
        assert_eq!(anchors.provenance.schedule, Some(UpdateSchedule::PerEpoch));
        assert!(out.centers.is_none());
    }

    #[test]
    fn identical_configs_reproduce_bit_identical_logs_and_models() {
        let data = tiny_dataset(7);
        let (query, gallery) = split_query_gallery(&data, 2, 5).unwrap();
        let cfg = tiny_config();
        let a = train(&cfg, &data, Some((&query, &gallery))).unwrap();
        let b = train(&cfg, &data, Some((&query, &gallery))).unwrap();
        assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn cls_only_stage2_never_touches_anchors() {
        let data = tiny_dataset(3);
        let cfg = TrainConfig {
            stage2_losses: vec![LossKind::Classification],
            ..tiny_config()
        };
        let out = train(&cfg, &data, None).unwrap();
        assert!(out.anchors.is_none());
        assert!(out.log.records.iter().all(|r| !r.anchors_updated));
    }

    #[test]
    fn immediate_stage2_aggregates_from_the_raw_model() {
        let data = tiny_dataset(19);
        let cfg = TrainConfig {
            e_start: 0,
            e_end: 2,
            ..tiny_config()
        };
        let out = train(&cfg, &data, None).unwrap();
        assert!(out.log.records.iter().all(|r| r.stage == 2));
        assert!(out.log.records[0].anchors_updated);
        assert!(out.stage1_model.is_none(), "no stage boundary was crossed");
    }

    #[test]
    fn per_iteration_schedule_streams_ema_updates() {
        let data = tiny_dataset(23);
        let cfg = TrainConfig {
            schedule: UpdateSchedule::PerIteration,
            ..tiny_config()
        };
        let out = train(&cfg, &data, None).unwrap();
        let anchors = out.anchors.unwrap();
        assert!(anchors.provenance.ema_steps > 0, "EMA steps were applied");
        assert_eq!(anchors.provenance.schedule, Some(UpdateSchedule::PerIteration));
    }

    #[test]
    fn fixed_schedule_aggregates_exactly_once() {
        let data = tiny_dataset(29);
        let cfg = TrainConfig {
            schedule: UpdateSchedule::Fixed,
            ..tiny_config()
        };
        let out = train(&cfg, &data, None).unwrap();
        let anchors = out.anchors.unwrap();
        assert_eq!(anchors.provenance.ema_steps, 0);
        assert_eq!(anchors.provenance.epoch_computed, 2, "kept the entry aggregation");
        let events: Vec<bool> = out
            .log
            .records
            .iter()
            .map(|r| r.anchors_updated)
            .collect();
        assert_eq!(events, vec![false, false, true, false]);
    }

    #[test]
    fn resume_into_stage_two_from_a_snapshot() {
        let data = tiny_dataset(31);
        let cfg = tiny_config();
        let full = train(&cfg, &data, None).unwrap();
        let snapshot = full.stage1_model.unwrap();

        let resumed = train_from(&cfg, &data, None, snapshot, cfg.e_start).unwrap();
        let recs = &resumed.log.records;
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.stage == 2));
        assert_eq!(recs[0].epoch, 2);
        assert!(recs[0].anchors_updated, "aggregation runs at resume");
    }

    #[test]
    fn divergence_aborts_with_location() {
        let data = tiny_dataset(37);
        let cfg = TrainConfig {
            base_lr: 1e200,
            warmup_epochs: 0,
            e_start: 0,
            e_end: 1,
            stage2_losses: vec![LossKind::Classification, LossKind::Triplet],
            ..tiny_config()
        };
        let err = train(&cfg, &data, None).unwrap_err();
        match err {
            Error::TrainingAbort { epoch, .. } => assert_eq!(epoch, 0),
            other => panic!("expected training abort, got {other}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let cases: Vec<TrainConfig> = vec![
            TrainConfig { e_start: 60, e_end: 60, ..ok.clone() },
            TrainConfig { stage1_losses: vec![], ..ok.clone() },
            TrainConfig { stage1_losses: vec![LossKind::Anchor], ..ok.clone() },
            TrainConfig { label_smoothing: 1.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { base_lr: 0.0, ..ok.clone() },
            TrainConfig {
                weights: LossWeights { cls: -1.0, ..LossWeights::default() },
                ..ok.clone()
            },
            TrainConfig {
                lr_decay: LrDecay { epochs: vec![5], factor: 0.0 },
                ..ok.clone()
            },
            TrainConfig { pk: PkConfig { p: 1, k: 4 }, ..ok.clone() },
            TrainConfig { eval_every: 0, ..ok.clone() },
        ];
        for (i, cfg) in cases.iter().enumerate() {
            assert!(cfg.validate().is_err(), "case {i} should fail validation");
        }
    }

    #[test]
    fn log_lines_match_the_documented_schema() {
        let mut losses = BTreeMap::new();
        losses.insert("cls".to_string(), 2.5);
        let rec = EpochRecord {
            epoch: 0,
            stage: 1,
            lr: 0.001,
            losses,
            anchors_updated: false,
            eval: None,
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"epoch":0,"stage":1,"lr":0.001,"losses":{"cls":2.5},"anchors_updated":false,"eval":null}"#
        );

        let rec = EpochRecord {
            eval: Some(EvalSnapshot { rank1: 0.5, map: 0.25 }),
            ..rec
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.ends_with(r#""eval":{"rank1":0.5,"mAP":0.25}}"#), "{json}");
    }

    #[test]
    fn jsonl_roundtrip_preserves_records() {
        let data = tiny_dataset(41);
        let (query, gallery) = split_query_gallery(&data, 2, 5).unwrap();
        let out = train(&tiny_config(), &data, Some((&query, &gallery))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        out.log.write_jsonl(&path).unwrap();
        let back = TrainLog::read_jsonl(&path).unwrap();
        assert_eq!(back, out.log);
        assert_eq!(back.to_jsonl().unwrap(), out.log.to_jsonl().unwrap());
    }

    #[test]
    fn intra_regression_flagging() {
        let mk = |epoch, stage, intra: Option<f64>| {
            let mut losses = BTreeMap::new();
            if let Some(v) = intra {
                losses.insert("train_intra".to_string(), v);
            }
            EpochRecord {
                epoch,
                stage,
                lr: 0.01,
                losses,
                anchors_updated: false,
                eval: None,
            }
        };
        let log = TrainLog {
            records: vec![
                mk(9, 1, Some(12.0)),
                mk(10, 2, Some(10.0)),
                mk(11, 2, Some(9.2)),
                mk(12, 2, Some(9.8)),
                mk(13, 2, Some(9.9)),
            ],
        };
        assert_eq!(log.stage1_end_intra(), Some(12.0));
        // 9.2 -> 9.8 is +6.5%; the Stage-I drop and 9.8 -> 9.9 (+1%) are not
        // violations.
        let flags = log.stage2_intra_regressions(0.05);
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].0, 12);
        assert!(log.stage2_intra_regressions(0.10).is_empty());
    }
}
