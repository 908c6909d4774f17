//! Loss functions and their analytic gradients.
//!
//! Five losses cover the training recipes:
//!
//! - `cross_entropy_ls`: softmax cross-entropy with label smoothing, on
//!   logits.
//! - `batch_hard_triplet`: hardest-positive / hardest-negative triplet loss
//!   within a batch, on features.
//! - `anchor_loss`: mean distance of each feature to its class anchor. The
//!   anchors are constants; gradients flow to features only.
//! - `triplet_anchor_loss`: anchor loss with a repulsion term against the
//!   nearest foreign anchor, hinged at zero by default.
//! - `parametric_center_loss`: squared distance to a learned per-class
//!   center; gradients flow to features *and* centers, which is exactly the
//!   coupling the non-parametric anchors avoid.
//!
//! Every gradient is already scaled by the batch-mean factor, so callers can
//! hand `grad_inputs` straight to the encoder's backward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    SquaredEuclidean,
}

impl DistanceMetric {
    pub fn distance(self, u: &[f64], v: &[f64]) -> f64 {
        let sq: f64 = u
            .iter()
            .zip(v)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum();
        match self {
            DistanceMetric::Euclidean => sq.sqrt(),
            DistanceMetric::SquaredEuclidean => sq,
        }
    }

    /// Gradient of `distance(u, v)` with respect to `u`, accumulated into
    /// `out` with weight `w`. The euclidean gradient at zero distance is the
    /// zero vector. The gradient with respect to `v` is the negation.
    pub fn add_grad_u(self, u: &[f64], v: &[f64], w: f64, out: &mut [f64]) {
        match self {
            DistanceMetric::SquaredEuclidean => {
                for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
                    *o += w * 2.0 * (a - b);
                }
            }
            DistanceMetric::Euclidean => {
                let d = self.distance(u, v);
                if d == 0.0 {
                    return;
                }
                for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
                    *o += w * (a - b) / d;
                }
            }
        }
    }
}

/// Value plus gradients. `grad_inputs` matches the primary input matrix of
/// the loss (logits for `cross_entropy_ls`, features for the rest);
/// `grad_centers` is present only for the parametric center loss.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad_inputs: Matrix,
    pub grad_centers: Option<Matrix>,
}

/// Learned per-class centers for the parametric baseline. Unlike anchors
/// these are optimizer state: randomly initialized and updated by gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    pub centers: Matrix,
    pub lr_multiplier: f64,
}

impl CenterBank {
    /// Standard-normal random centers; the seed-to-seed spread this injects
    /// is what the variance experiment measures.
    pub fn init_random(num_classes: usize, feat_dim: usize, lr_multiplier: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Matrix::zeros(num_classes, feat_dim);
        for v in centers.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z;
        }
        CenterBank {
            centers,
            lr_multiplier,
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Softmax cross-entropy against a smoothed target: probability `1 - eps` on
/// the true class and `eps / (C - 1)` on each other class. Returns the batch
/// mean; `grad_inputs` is with respect to the logits.
pub fn cross_entropy_ls(logits: &Matrix, labels: &[usize], eps: f64) -> Result<LossOutput> {
    let (m, c) = (logits.rows(), logits.cols());
    if c < 2 {
        return Err(Error::Config("cross-entropy needs at least 2 classes".into()));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "label smoothing must be in [0, 1), got {eps}"
        )));
    }
    check_labels(labels, m, c)?;

    let off = eps / (c as f64 - 1.0);
    let mut value = 0.0;
    let mut grad = Matrix::zeros(m, c);
    for i in 0..m {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let g = grad.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            let q = if labels[i] == j { 1.0 - eps } else { off };
            let logp = z - lse;
            value -= q * logp;
            g[j] = (logp.exp() - q) / m as f64;
        }
    }
    Ok(LossOutput {
        value: value / m as f64,
        grad_inputs: grad,
        grad_centers: None,
    })
}

/// Batch-hard triplet loss: for every sample that has at least one other
/// sample of its class and at least one of another class, take its farthest
/// positive and nearest negative and hinge `margin + d_pos - d_neg`. Mean
/// over those valid anchors; ties pick the lowest index.
pub fn batch_hard_triplet(
    features: &Matrix,
    labels: &[usize],
    margin: f64,
    metric: DistanceMetric,
) -> Result<LossOutput> {
    let m = features.rows();
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} rows", labels.len())));
    }

    // Pairwise distances once; batches are small.
    let mut dist = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = metric.distance(features.row(i), features.row(j));
            dist[i * m + j] = d;
            dist[j * m + i] = d;
        }
    }

    struct Pick {
        anchor: usize,
        pos: usize,
        neg: usize,
        active: f64,
    }
    let mut picks = Vec::new();
    let mut total = 0.0;
    for i in 0..m {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..m {
            let d = dist[i * m + j];
            if labels[j] == labels[i] {
                if j != i && pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, dp)), Some((n, dn))) = (pos, neg) {
            let term = (margin + dp - dn).max(0.0);
            total += term;
            picks.push(Pick {
                anchor: i,
                pos: p,
                neg: n,
                active: if margin + dp - dn > 0.0 { 1.0 } else { 0.0 },
            });
        }
    }
    if picks.is_empty() {
        return Err(Error::DegenerateBatch(
            "no sample has both a positive and a negative in the batch".into(),
        ));
    }

    let v = picks.len() as f64;
    let mut grad = Matrix::zeros(m, features.cols());
    for p in &picks {
        if p.active == 0.0 {
            continue;
        }
        let w = 1.0 / v;
        let (a, pos, neg) = (p.anchor, p.pos, p.neg);
        // d_pos term: +grad wrt anchor and its negation wrt the positive.
        let fa = features.row(a).to_vec();
        metric.add_grad_u(&fa, features.row(pos), w, grad.row_mut(a));
        metric.add_grad_u(features.row(pos), &fa, w, grad.row_mut(pos));
        // d_neg term enters with a minus sign.
        metric.add_grad_u(&fa, features.row(neg), -w, grad.row_mut(a));
        metric.add_grad_u(features.row(neg), &fa, -w, grad.row_mut(neg));
    }

    Ok(LossOutput {
        value: total / v,
        grad_inputs: grad,
        grad_centers: None,
    })
}

fn check_anchor_shapes(features: &Matrix, labels: &[usize], anchors: &Matrix) -> Result<()> {
    check_labels(labels, features.rows(), anchors.rows())?;
    if anchors.cols() != features.cols() {
        return Err(Error::Shape(format!(
            "anchors have dimension {}, features {}",
            anchors.cols(),
            features.cols()
        )));
    }
    Ok(())
}

/// Mean distance of each feature to the anchor of its class. The anchors are
/// constants: no gradient flows into them.
pub fn anchor_loss(
    features: &Matrix,
    labels: &[usize],
    anchors: &Matrix,
    metric: DistanceMetric,
) -> Result<LossOutput> {
    check_anchor_shapes(features, labels, anchors)?;
    let m = features.rows();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(m, features.cols());
    let w = 1.0 / m as f64;
    for i in 0..m {
        let a = anchors.row(labels[i]);
        value += metric.distance(features.row(i), a);
        let fi = features.row(i).to_vec();
        metric.add_grad_u(&fi, a, w, grad.row_mut(i));
    }
    Ok(LossOutput {
        value: value * w,
        grad_inputs: grad,
        grad_centers: None,
    })
}

/// Anchor loss with a repulsion term: `D(f, a_y) - min_{k != y} D(f, a_k) +
/// margin`, hinged at zero. Ties in the minimum go to the lowest class id.
pub fn triplet_anchor_loss(
    features: &Matrix,
    labels: &[usize],
    anchors: &Matrix,
    margin: f64,
    metric: DistanceMetric,
) -> Result<LossOutput> {
    triplet_anchor_loss_with(features, labels, anchors, margin, metric, true)
}

/// [`triplet_anchor_loss`] with the hinge optional: `hinge = false` keeps the
/// signed value, which rewards pushing past the margin.
pub fn triplet_anchor_loss_with(
    features: &Matrix,
    labels: &[usize],
    anchors: &Matrix,
    margin: f64,
    metric: DistanceMetric,
    hinge: bool,
) -> Result<LossOutput> {
    check_anchor_shapes(features, labels, anchors)?;
    if anchors.rows() < 2 {
        return Err(Error::Data(
            "triplet anchor loss needs at least 2 anchors".into(),
        ));
    }
    let m = features.rows();
    let w = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(m, features.cols());
    for i in 0..m {
        let y = labels[i];
        let fi = features.row(i);
        let d_own = metric.distance(fi, anchors.row(y));
        let (mut k_min, mut d_min) = (usize::MAX, f64::INFINITY);
        for k in 0..anchors.rows() {
            if k == y {
                continue;
            }
            let d = metric.distance(fi, anchors.row(k));
            if d < d_min {
                (k_min, d_min) = (k, d);
            }
        }
        let raw = d_own - d_min + margin;
        let (term, active) = if hinge {
            (raw.max(0.0), raw > 0.0)
        } else {
            (raw, true)
        };
        value += term;
        if active {
            let fi = fi.to_vec();
            metric.add_grad_u(&fi, anchors.row(y), w, grad.row_mut(i));
            metric.add_grad_u(&fi, anchors.row(k_min), -w, grad.row_mut(i));
        }
    }
    Ok(LossOutput {
        value: value * w,
        grad_inputs: grad,
        grad_centers: None,
    })
}

/// Squared distance to a learned per-class center, batch mean. Gradients
/// flow both to the features and to the centers.
pub fn parametric_center_loss(
    features: &Matrix,
    labels: &[usize],
    bank: &CenterBank,
) -> Result<LossOutput> {
    check_anchor_shapes(features, labels, &bank.centers)?;
    let m = features.rows();
    let d = features.cols();
    let w = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(m, d);
    let mut grad_centers = Matrix::zeros(bank.centers.rows(), d);
    for i in 0..m {
        let y = labels[i];
        let c = bank.centers.row(y);
        let f = features.row(i);
        let gf = grad.row_mut(i);
        for j in 0..d {
            let diff = f[j] - c[j];
            value += diff * diff;
            gf[j] = 2.0 * w * diff;
        }
        let gc = grad_centers.row_mut(y);
        for j in 0..d {
            gc[j] -= 2.0 * w * (f[j] - c[j]);
        }
    }
    Ok(LossOutput {
        value: value * w,
        grad_inputs: grad,
        grad_centers: Some(grad_centers),
    })
}

/// Weighted sum of loss outputs whose `grad_inputs` live in the same space.
pub fn combine(terms: &[(f64, &LossOutput)]) -> Result<LossOutput> {
    let Some((_, first)) = terms.first() else {
        return Err(Error::Config("combine needs at least one term".into()));
    };
    let (rows, cols) = (first.grad_inputs.rows(), first.grad_inputs.cols());
    let mut value = 0.0;
    let mut grad = Matrix::zeros(rows, cols);
    let mut centers: Option<Matrix> = None;
    for (w, t) in terms {
        if t.grad_inputs.rows() != rows || t.grad_inputs.cols() != cols {
            return Err(Error::Shape(format!(
                "cannot combine gradients of {}x{} with {rows}x{cols}",
                t.grad_inputs.rows(),
                t.grad_inputs.cols()
            )));
        }
        value += w * t.value;
        for (dst, src) in grad.data_mut().iter_mut().zip(t.grad_inputs.data()) {
            *dst += w * src;
        }
        if let Some(gc) = &t.grad_centers {
            let acc = centers.get_or_insert_with(|| Matrix::zeros(gc.rows(), gc.cols()));
            if acc.rows() != gc.rows() || acc.cols() != gc.cols() {
                return Err(Error::Shape("center gradient shapes differ".into()));
            }
            for (dst, src) in acc.data_mut().iter_mut().zip(gc.data()) {
                *dst += w * src;
            }
        }
    }
    Ok(LossOutput {
        value,
        grad_inputs: grad,
        grad_centers: centers,
    })
}
