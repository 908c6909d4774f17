//! Non-parametric class anchors: whole-dataset aggregation and the streaming
//! update.
//!
//! An anchor is a constant representative of its class in feature space. Two
//! aggregators build the full set from an embedded training set:
//!
//! - average: the per-class mean;
//! - weighted: the per-class mean weighted by each sample's own-class softmax
//!   probability, so confidently classified samples count more.
//!
//! Between full aggregations, `ema_update` folds a training batch in:
//!
//! ```text
//! a_j <- (1 - eta * n_j) * a_j + eta * sum_{i in B, y_i = j} f_i
//! ```
//!
//! with `eta = 1 / N_j` (class size in the training set) and `n_j` the number
//! of class-`j` samples in the batch. The second term is a sum, not a mean:
//! with the whole class in one batch the update lands exactly on the class
//! mean, and smaller batches move the anchor proportionally.
//!
//! Sums are compensated (Kahan) and accumulate in dataset order, so the
//! aggregation oracles can pin tolerances at 1e-12. Weights are normalized by
//! the per-class maximum before accumulating; this keeps the arithmetic of
//! uniform weights identical to the plain average.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingBatch;
use crate::matrix::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Average,
    Weighted,
}

impl AggregationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMethod::Average => "average",
            AggregationMethod::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "average" => Some(AggregationMethod::Average),
            "weighted" => Some(AggregationMethod::Weighted),
            _ => None,
        }
    }
}

/// Where an anchor set came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: AggregationMethod,
    /// Refresh schedule the producing run was on; `None` for one-shot exports.
    pub schedule: Option<UpdateSchedule>,
    /// Epoch at which the full aggregation ran.
    pub epoch_computed: usize,
    /// Streaming updates applied since then.
    pub ema_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    /// `num_classes x feat_dim`.
    pub anchors: Matrix,
    /// Training-set population of each class; the EMA step size is its
    /// reciprocal.
    pub class_counts: Vec<usize>,
    pub provenance: Provenance,
}

impl AnchorSet {
    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.anchors.cols()
    }
}

/// Compensated accumulator; the correction term recovers the low-order bits
/// a plain sum drops.
#[derive(Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum
    }
}

/// Per-class mean of the embedded features. Every class must have at least
/// one sample.
pub fn aggregate_average(emb: &EmbeddingBatch, epoch: usize) -> Result<AnchorSet> {
    let uniform = vec![1.0; emb.len()];
    aggregate_with_weights(emb, &uniform, AggregationMethod::Average, epoch)
}

/// Per-class weighted mean, each sample weighted by the softmax probability
/// of its *own* class, `probs[i, y_i]`. Classes whose weights sum to zero are
/// an error.
pub fn aggregate_weighted(emb: &EmbeddingBatch, probs: &Matrix, epoch: usize) -> Result<AnchorSet> {
    if probs.rows() != emb.len() || probs.cols() != emb.num_classes {
        return Err(Error::Shape(format!(
            "probability matrix is {}x{}, expected {}x{}",
            probs.rows(),
            probs.cols(),
            emb.len(),
            emb.num_classes
        )));
    }
    let weights: Vec<f64> = emb
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.get(i, y))
        .collect();
    aggregate_with_weights(emb, &weights, AggregationMethod::Weighted, epoch)
}

fn aggregate_with_weights(
    emb: &EmbeddingBatch,
    weights: &[f64],
    method: AggregationMethod,
    epoch: usize,
) -> Result<AnchorSet> {
    let c = emb.num_classes;
    let d = emb.features.cols();
    if c == 0 {
        return Err(Error::Data("no classes to aggregate".into()));
    }
    if let Some(&bad) = emb.labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    if let Some((i, &w)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !w.is_finite() || **w < 0.0)
    {
        return Err(Error::Data(format!("weight {w} of sample {i} is invalid")));
    }

    // Normalize by the per-class maximum so uniform weights reduce to the
    // exact arithmetic of the plain average (w / w_max == 1.0 exactly).
    let mut max_w = vec![0.0f64; c];
    for (&y, &w) in emb.labels.iter().zip(weights) {
        if w > max_w[y] {
            max_w[y] = w;
        }
    }

    let mut num = vec![KahanSum::default(); c * d];
    let mut den = vec![KahanSum::default(); c];
    let mut counts = vec![0usize; c];
    for (i, &y) in emb.labels.iter().enumerate() {
        counts[y] += 1;
        if max_w[y] == 0.0 {
            continue;
        }
        let w = weights[i] / max_w[y];
        den[y].add(w);
        let row = emb.features.row(i);
        for (acc, &f) in num[y * d..(y + 1) * d].iter_mut().zip(row) {
            acc.add(w * f);
        }
    }

    let mut anchors = Matrix::zeros(c, d);
    for j in 0..c {
        if counts[j] == 0 {
            return Err(Error::Data(format!("class {j} has no samples to aggregate")));
        }
        let denom = den[j].value();
        if denom == 0.0 {
            return Err(Error::Data(format!(
                "class {j} has zero total weight; cannot aggregate"
            )));
        }
        let dst = anchors.row_mut(j);
        for (v, acc) in dst.iter_mut().zip(&num[j * d..(j + 1) * d]) {
            *v = acc.value() / denom;
        }
    }

    Ok(AnchorSet {
        anchors,
        class_counts: counts,
        provenance: Provenance {
            method,
            schedule: None,
            epoch_computed: epoch,
            ema_steps: 0,
        },
    })
}

/// Streaming anchor update from one training batch. Classes absent from the
/// batch keep their anchors; labels must belong to classes the set knows
/// (nonzero training population).
pub fn ema_update(set: &mut AnchorSet, features: &Matrix, labels: &[usize]) -> Result<()> {
    let (c, d) = (set.num_classes(), set.feat_dim());
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    if features.cols() != d {
        return Err(Error::Shape(format!(
            "features have dimension {}, anchors {d}",
            features.cols()
        )));
    }
    for &y in labels {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        if set.class_counts[y] == 0 {
            return Err(Error::Data(format!(
                "class {y} has no training population; cannot update its anchor"
            )));
        }
    }

    let mut batch_count = vec![0usize; c];
    let mut batch_sum = vec![0.0f64; c * d];
    for (i, &y) in labels.iter().enumerate() {
        batch_count[y] += 1;
        for (acc, &f) in batch_sum[y * d..(y + 1) * d].iter_mut().zip(features.row(i)) {
            *acc += f;
        }
    }
    for j in 0..c {
        if batch_count[j] == 0 {
            continue;
        }
        let eta = 1.0 / set.class_counts[j] as f64;
        let keep = 1.0 - eta * batch_count[j] as f64;
        let row = set.anchors.row_mut(j);
        for (a, &s) in row.iter_mut().zip(&batch_sum[j * d..(j + 1) * d]) {
            *a = keep * *a + eta * s;
        }
    }
    set.provenance.ema_steps += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSchedule {
    /// Aggregate once when the anchor stage begins, then hold.
    Fixed,
    /// Re-aggregate over the whole training set at every epoch end.
    PerEpoch,
    /// Seed with a full aggregation, then `ema_update` after every iteration.
    PerIteration,
}

impl UpdateSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateSchedule::Fixed => "fixed",
            UpdateSchedule::PerEpoch => "per_epoch",
            UpdateSchedule::PerIteration => "per_iteration",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(UpdateSchedule::Fixed),
            "per_epoch" => Some(UpdateSchedule::PerEpoch),
            "per_iteration" => Some(UpdateSchedule::PerIteration),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulePhase {
    /// The moment training first enters the anchor stage (or resumes into it).
    Stage2Start,
    EpochEnd,
    IterationEnd,
}

/// Whether anchors refresh at this point. `epoch` is the current epoch,
/// `e_start` the first anchor-stage epoch; epoch ends before `e_start` never
/// update.
pub fn schedule_should_update(
    schedule: UpdateSchedule,
    phase: SchedulePhase,
    epoch: usize,
    e_start: usize,
) -> bool {
    match phase {
        SchedulePhase::Stage2Start => true,
        SchedulePhase::EpochEnd => schedule == UpdateSchedule::PerEpoch && epoch >= e_start,
        SchedulePhase::IterationEnd => {
            schedule == UpdateSchedule::PerIteration && epoch >= e_start
        }
    }
}

/// Writes the anchor text format:
///
/// ```text
/// anchorset v1 C=<C> D=<feat_dim> method=<m> epoch=<e> ema=<n> [schedule=<s>]
/// j,count,a_1,...,a_D
/// ```
pub fn write_anchors(set: &AnchorSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "anchorset v1 C={} D={} method={} epoch={} ema={}",
        set.num_classes(),
        set.feat_dim(),
        set.provenance.method.as_str(),
        set.provenance.epoch_computed,
        set.provenance.ema_steps
    ));
    if let Some(s) = set.provenance.schedule {
        out.push_str(&format!(" schedule={}", s.as_str()));
    }
    out.push('\n');
    for j in 0..set.num_classes() {
        out.push_str(&format!("{j},{}", set.class_counts[j]));
        for v in set.anchors.row(j) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    crate::util::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet> {
    let text = std::fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: shown.clone(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() < 4 || tokens[0] != "anchorset" || tokens[1] != "v1" {
        return Err(parse_err(
            1,
            format!("expected header 'anchorset v1 C=<C> D=<D>', found '{header}'"),
        ));
    }
    let c: usize = tokens[2]
        .strip_prefix("C=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(1, format!("bad class count token '{}'", tokens[2])))?;
    let d: usize = tokens[3]
        .strip_prefix("D=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(1, format!("bad dimension token '{}'", tokens[3])))?;
    let mut provenance = Provenance {
        method: AggregationMethod::Average,
        schedule: None,
        epoch_computed: 0,
        ema_steps: 0,
    };
    for tok in &tokens[4..] {
        if let Some(m) = tok.strip_prefix("method=") {
            provenance.method = AggregationMethod::parse(m)
                .ok_or_else(|| parse_err(1, format!("bad method token '{tok}'")))?;
        } else if let Some(s) = tok.strip_prefix("schedule=") {
            provenance.schedule = Some(
                UpdateSchedule::parse(s)
                    .ok_or_else(|| parse_err(1, format!("bad schedule token '{tok}'")))?,
            );
        } else if let Some(e) = tok.strip_prefix("epoch=") {
            provenance.epoch_computed = e
                .parse()
                .map_err(|_| parse_err(1, format!("bad epoch token '{tok}'")))?;
        } else if let Some(n) = tok.strip_prefix("ema=") {
            provenance.ema_steps = n
                .parse()
                .map_err(|_| parse_err(1, format!("bad ema token '{tok}'")))?;
        } else {
            return Err(parse_err(1, format!("unknown header token '{tok}'")));
        }
    }

    let mut anchors = Matrix::zeros(c, d);
    let mut class_counts = vec![0usize; c];
    let mut seen = vec![false; c];
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", d + 2, fields.len()),
            ));
        }
        let j: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, "bad class id".into()))?;
        if j >= c {
            return Err(parse_err(lineno, format!("class id {j} out of range for C={c}")));
        }
        if seen[j] {
            return Err(parse_err(lineno, format!("duplicate anchor for class {j}")));
        }
        seen[j] = true;
        class_counts[j] = fields[1]
            .parse()
            .map_err(|_| parse_err(lineno, "bad class count".into()))?;
        for (k, tok) in fields[2..].iter().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad anchor value '{tok}'")))?;
            anchors.set(j, k, v);
        }
    }
    if let Some(j) = seen.iter().position(|&s| !s) {
        return Err(Error::Data(format!(
            "{shown}: anchor for class {j} is missing"
        )));
    }

    Ok(AnchorSet {
        anchors,
        class_counts,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn embedding(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> EmbeddingBatch {
        EmbeddingBatch {
            features: Matrix::from_rows(features),
            groups: vec![None; labels.len()],
            labels,
            num_classes,
        }
    }

    fn random_embedding(seed: u64, n: usize, c: usize, d: usize) -> EmbeddingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Matrix::zeros(n, d);
        for v in features.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = 3.0 * z;
        }
        // Every class gets at least one sample.
        let labels: Vec<usize> = (0..n)
            .map(|i| if i < c { i } else { rng.random_range(0..c) })
            .collect();
        EmbeddingBatch {
            features,
            groups: vec![None; n],
            labels,
            num_classes: c,
        }
    }

    #[test]
    fn average_of_two_points_is_midpoint() {
        let emb = embedding(vec![vec![1.0, 0.0], vec![3.0, 0.0]], vec![0, 0], 1);
        let set = aggregate_average(&emb, 0).unwrap();
        assert_eq!(set.anchors.row(0), &[2.0, 0.0]);
        assert_eq!(set.class_counts, vec![2]);
    }

    #[test]
    fn singleton_class_anchor_is_the_sample() {
        let emb = embedding(
            vec![vec![0.3, -1.7, 2.2], vec![1.0, 1.0, 1.0], vec![2.0, 0.0, 0.0]],
            vec![0, 1, 1],
            2,
        );
        let set = aggregate_average(&emb, 0).unwrap();
        assert_eq!(set.anchors.row(0), &[0.3, -1.7, 2.2]);
    }

    #[test]
    fn average_matches_naive_per_class_means() {
        for seed in 0..20u64 {
            let emb = random_embedding(seed, 40, 5, 3);
            let set = aggregate_average(&emb, 0).unwrap();
            for j in 0..5 {
                let members: Vec<usize> = (0..emb.len()).filter(|&i| emb.labels[i] == j).collect();
                for k in 0..3 {
                    let want: f64 = members.iter().map(|&i| emb.features.get(i, k)).sum::<f64>()
                        / members.len() as f64;
                    let got = set.anchors.get(j, k);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "seed {seed} class {j} dim {k}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn uniform_weights_equal_average_bitwise() {
        for seed in 0..10u64 {
            let emb = random_embedding(seed, 30, 4, 3);
            let mut probs = Matrix::zeros(30, 4);
            for v in probs.data_mut() {
                *v = 0.25;
            }
            let avg = aggregate_average(&emb, 0).unwrap();
            let wtd = aggregate_weighted(&emb, &probs, 0).unwrap();
            assert_eq!(avg.anchors, wtd.anchors, "seed {seed}");
        }
    }

    #[test]
    fn weighted_hand_case() {
        // (0,0) with own-class probability 0.9, (1,0) with 0.1:
        // (0.9*0 + 0.1*1) / (0.9 + 0.1) = 0.1.
        let emb = embedding(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0, 0], 1);
        let probs = Matrix::from_rows(vec![vec![0.9], vec![0.1]]);
        let set = aggregate_weighted(&emb, &probs, 0).unwrap();
        assert!((set.anchors.get(0, 0) - 0.1).abs() < 1e-12);
        assert_eq!(set.anchors.get(0, 1), 0.0);
    }

    #[test]
    fn weighted_matches_naive_weighted_means() {
        for seed in 0..20u64 {
            let emb = random_embedding(seed, 40, 5, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut probs = Matrix::zeros(40, 5);
            for v in probs.data_mut() {
                *v = rng.random_range(0.05..1.0);
            }
            let set = aggregate_weighted(&emb, &probs, 0).unwrap();
            for j in 0..5 {
                let members: Vec<usize> = (0..emb.len()).filter(|&i| emb.labels[i] == j).collect();
                let den: f64 = members.iter().map(|&i| probs.get(i, j)).sum();
                for k in 0..3 {
                    let num: f64 = members
                        .iter()
                        .map(|&i| probs.get(i, j) * emb.features.get(i, k))
                        .sum();
                    let got = set.anchors.get(j, k);
                    assert!(
                        (got - num / den).abs() < 1e-12,
                        "seed {seed} class {j} dim {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn weighted_rejects_zero_weight_class() {
        let emb = embedding(vec![vec![1.0], vec![2.0]], vec![0, 0], 1);
        let probs = Matrix::zeros(2, 1);
        let err = aggregate_weighted(&emb, &probs, 0).unwrap_err();
        assert!(err.to_string().contains("zero total weight"), "{err}");
    }

    #[test]
    fn empty_class_is_an_error() {
        let emb = embedding(vec![vec![1.0]], vec![0], 2);
        let err = aggregate_average(&emb, 0).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    // The second term of the streaming update sums the batch features; an
    // implementation that averaged them would return 1.1 here instead.
    #[test]
    fn ema_update_hand_case_sums_the_batch() {
        let emb = embedding(vec![vec![1.0, 0.0]], vec![0], 1);
        let mut set = aggregate_average(&emb, 0).unwrap();
        set.class_counts = vec![10];
        let batch = Matrix::from_rows(vec![vec![2.0, 0.0], vec![4.0, 0.0]]);
        ema_update(&mut set, &batch, &[0, 0]).unwrap();
        // (1 - 0.1*2) * 1 + 0.1 * (2 + 4) = 0.8 + 0.6 = 1.4
        assert!((set.anchors.get(0, 0) - 1.4).abs() < 1e-15);
        assert_eq!(set.anchors.get(0, 1), 0.0);
        assert_eq!(set.provenance.ema_steps, 1);
    }

    #[test]
    fn ema_whole_class_in_one_batch_lands_on_batch_mean() {
        let emb = random_embedding(60, 12, 3, 4);
        let mut set = aggregate_average(&emb, 0).unwrap();
        // Feed the entire class 1 population as one batch of fresh values.
        let n1 = set.class_counts[1];
        let mut rows = Vec::new();
        for i in 0..n1 {
            rows.push(vec![i as f64, 1.0, -2.0, 0.5]);
        }
        let batch = Matrix::from_rows(rows.clone());
        ema_update(&mut set, &batch, &vec![1; n1]).unwrap();
        for k in 0..4 {
            let mean: f64 = rows.iter().map(|r| r[k]).sum::<f64>() / n1 as f64;
            assert!(
                (set.anchors.get(1, k) - mean).abs() < 1e-12,
                "dim {k}: {} vs {mean}",
                set.anchors.get(1, k)
            );
        }
    }

    #[test]
    fn ema_leaves_absent_classes_untouched() {
        let emb = random_embedding(61, 12, 3, 4);
        let mut set = aggregate_average(&emb, 0).unwrap();
        let before = set.anchors.clone();
        let batch = Matrix::from_rows(vec![vec![9.0, 9.0, 9.0, 9.0]]);
        ema_update(&mut set, &batch, &[0]).unwrap();
        assert_eq!(set.anchors.row(1), before.row(1));
        assert_eq!(set.anchors.row(2), before.row(2));
        assert_ne!(set.anchors.row(0), before.row(0));
    }

    // Oracle recomputation of the update formula over a frozen feature set,
    // checked after every batch of an epoch-like pass.
    #[test]
    fn ema_matches_direct_recomputation_over_an_epoch() {
        let emb = random_embedding(62, 24, 4, 3);
        let mut set = aggregate_average(&emb, 0).unwrap();
        let mut oracle = set.anchors.clone();
        let counts = set.class_counts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..8 {
            let batch_idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..emb.len())).collect();
            let rows: Vec<Vec<f64>> = batch_idx
                .iter()
                .map(|&i| emb.features.row(i).to_vec())
                .collect();
            let labels: Vec<usize> = batch_idx.iter().map(|&i| emb.labels[i]).collect();
            let batch = Matrix::from_rows(rows.clone());
            ema_update(&mut set, &batch, &labels).unwrap();

            for j in 0..4 {
                let members: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == j).collect();
                if members.is_empty() {
                    continue;
                }
                let eta = 1.0 / counts[j] as f64;
                let keep = 1.0 - eta * members.len() as f64;
                for k in 0..3 {
                    let sum: f64 = members.iter().map(|&i| rows[i][k]).sum();
                    let want = keep * oracle.get(j, k) + eta * sum;
                    oracle.set(j, k, want);
                }
            }
            for j in 0..4 {
                for k in 0..3 {
                    assert!(
                        (set.anchors.get(j, k) - oracle.get(j, k)).abs() < 1e-15,
                        "class {j} dim {k} drifted from the direct recomputation"
                    );
                }
            }
        }
    }

    #[test]
    fn ema_rejects_unknown_classes() {
        // Class 1 exists in the registry but has no population.
        let mut set = AnchorSet {
            anchors: Matrix::zeros(2, 1),
            class_counts: vec![1, 0],
            provenance: Provenance {
                method: AggregationMethod::Average,
                schedule: None,
                epoch_computed: 0,
                ema_steps: 0,
            },
        };
        let batch = Matrix::from_rows(vec![vec![1.0]]);
        assert!(ema_update(&mut set, &batch, &[1]).is_err(), "empty population");
        assert!(ema_update(&mut set, &batch, &[2]).is_err(), "out of range");
    }

    #[test]
    fn schedule_decision_table() {
        use SchedulePhase::*;
        use UpdateSchedule::*;
        let e_start = 40;
        for sched in [Fixed, PerEpoch, PerIteration] {
            assert!(schedule_should_update(sched, Stage2Start, e_start, e_start));
        }
        assert!(!schedule_should_update(Fixed, EpochEnd, 43, e_start));
        assert!(!schedule_should_update(Fixed, IterationEnd, 43, e_start));
        assert!(schedule_should_update(PerEpoch, EpochEnd, 43, e_start));
        assert!(!schedule_should_update(PerEpoch, EpochEnd, 39, e_start));
        assert!(!schedule_should_update(PerEpoch, IterationEnd, 43, e_start));
        assert!(schedule_should_update(PerIteration, IterationEnd, 40, e_start));
        assert!(!schedule_should_update(PerIteration, EpochEnd, 43, e_start));
    }

    #[test]
    fn anchor_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        let emb = random_embedding(70, 20, 3, 4);
        let mut set = aggregate_average(&emb, 7).unwrap();
        set.anchors.set(0, 0, 0.1 + 0.2);
        write_anchors(&set, &path).unwrap();
        let back = read_anchors(&path).unwrap();
        assert_eq!(back, set);

        set.provenance.schedule = Some(UpdateSchedule::PerIteration);
        set.provenance.ema_steps = 12;
        write_anchors(&set, &path).unwrap();
        let back = read_anchors(&path).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn anchor_file_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");

        std::fs::write(&p, "anchorset v1 C=2 D=2\n0,5,1.0,2.0\n").unwrap();
        let err = read_anchors(&p).unwrap_err();
        assert!(err.to_string().contains("class 1 is missing"), "{err}");

        std::fs::write(&p, "anchorset v1 C=1 D=2\n0,5,1.0\n").unwrap();
        let err = read_anchors(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");

        std::fs::write(&p, "wrong v1 C=1 D=2\n").unwrap();
        assert!(read_anchors(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Aggregation is permutation invariant up to compensated-sum
        // reordering noise.
        #[test]
        fn aggregation_is_permutation_invariant(seed in 0u64..3000) {
            let emb = random_embedding(seed, 25, 4, 3);
            let mut perm: Vec<usize> = (0..25).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
            for i in (1..25usize).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let shuffled = EmbeddingBatch {
                features: Matrix::from_rows(
                    perm.iter().map(|&i| emb.features.row(i).to_vec()).collect(),
                ),
                labels: perm.iter().map(|&i| emb.labels[i]).collect(),
                groups: vec![None; 25],
                num_classes: 4,
            };
            let a = aggregate_average(&emb, 0).unwrap();
            let b = aggregate_average(&shuffled, 0).unwrap();
            for j in 0..4 {
                for k in 0..3 {
                    prop_assert!((a.anchors.get(j, k) - b.anchors.get(j, k)).abs() < 1e-12);
                }
            }
        }
    }
}
