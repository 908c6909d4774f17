//! Fully-connected encoder with analytic forward/backward passes.
//!
//! The network is `input -> hidden... -> feat_dim` with ReLU between hidden
//! layers and no activation after the final embedding layer. An optional neck
//! (batch-norm style per-dimension normalization) sits between the embedding
//! and the classifier: metric losses consume the pre-neck features `f`, the
//! classifier consumes the normalized ones. In training mode the neck uses
//! batch statistics; inference uses the running statistics it accumulated.
//!
//! Everything is f64 and deterministic. `forward` is pure; the trainer folds
//! batch statistics into the running ones explicitly via
//! [`EncoderModel::update_running_stats`], so gradient checks can re-run the
//! forward pass freely.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::matrix::Matrix;
use crate::{Error, Result};

pub const NECK_EPS: f64 = 1e-5;
pub const NECK_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `out x in`, row per output unit.
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neck {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub input_dim: usize,
    pub feat_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<Affine>,
    pub neck: Option<Neck>,
    /// `num_classes x feat_dim`, no bias.
    pub classifier: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Training,
    Inference,
}

/// Neck values captured by the forward pass. In training mode `mean`/`var`
/// are the batch statistics; in inference mode they are the running ones.
#[derive(Clone, Debug)]
pub struct NeckCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub mode: ForwardMode,
    /// `post_acts[l]` is the input to layer `l`; the last entry is the
    /// embedding `f` (pre-neck).
    pub post_acts: Vec<Matrix>,
    /// Pre-activation of each layer, for the ReLU masks on the way back.
    pub pre_acts: Vec<Matrix>,
    pub features: Matrix,
    pub neck: Option<NeckCache>,
    pub necked: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

/// Gradients congruent with the model's parameter tensors.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub layers: Vec<Affine>,
    /// `(d_gamma, d_beta)` when the model has a neck.
    pub neck: Option<(Vec<f64>, Vec<f64>)>,
    pub classifier: Matrix,
}

impl GradientSet {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        GradientSet {
            layers: model
                .layers
                .iter()
                .map(|l| Affine {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            neck: model
                .neck
                .as_ref()
                .map(|n| (vec![0.0; n.gamma.len()], vec![0.0; n.beta.len()])),
            classifier: Matrix::zeros(model.classifier.rows(), model.classifier.cols()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
            && self.neck.as_ref().is_none_or(|(g, b)| {
                g.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())
            })
            && self.classifier.is_finite()
    }

    /// Flat gradient view in the same order as [`EncoderModel::param`].
    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            let nw = l.w.data().len();
            if idx < nw {
                return l.w.data()[idx];
            }
            idx -= nw;
            if idx < l.b.len() {
                return l.b[idx];
            }
            idx -= l.b.len();
        }
        if let Some((gamma, beta)) = &self.neck {
            if idx < gamma.len() {
                return gamma[idx];
            }
            idx -= gamma.len();
            if idx < beta.len() {
                return beta[idx];
            }
            idx -= beta.len();
        }
        self.classifier.data()[idx]
    }
}

impl EncoderModel {
    /// He-style init: weights `N(0, 2/fan_in)`, zero biases, classifier rows
    /// `N(0, 1/feat_dim)` with no bias, identity neck.
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        feat_dim: usize,
        num_classes: usize,
        use_neck: bool,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || feat_dim == 0 || hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(feat_dim);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let mut m = Matrix::zeros(fan_out, fan_in);
            for v in m.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
            layers.push(Affine {
                w: m,
                b: vec![0.0; fan_out],
            });
        }

        let cls_scale = (1.0 / feat_dim as f64).sqrt();
        let mut classifier = Matrix::zeros(num_classes, feat_dim);
        for v in classifier.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = cls_scale * z;
        }

        Ok(EncoderModel {
            input_dim,
            feat_dim,
            num_classes,
            layers,
            neck: use_neck.then(|| Neck {
                gamma: vec![1.0; feat_dim],
                beta: vec![0.0; feat_dim],
                running_mean: vec![0.0; feat_dim],
                running_var: vec![1.0; feat_dim],
            }),
            classifier,
        })
    }

    /// Pure forward pass. Training mode normalizes with batch statistics but
    /// does not touch the running ones; fold them in afterwards with
    /// [`EncoderModel::update_running_stats`].
    pub fn forward(&self, inputs: &Matrix, mode: ForwardMode) -> Result<ForwardCache> {
        if inputs.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                inputs.cols(),
                self.input_dim
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let m = inputs.rows();
        let num_layers = self.layers.len();

        let mut post_acts = vec![inputs.clone()];
        let mut pre_acts = Vec::with_capacity(num_layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine_forward(post_acts.last().unwrap(), &layer.w, &layer.b);
            let a = if l + 1 < num_layers {
                let mut a = z.clone();
                for v in a.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                a
            } else {
                z.clone()
            };
            pre_acts.push(z);
            post_acts.push(a);
        }
        let features = post_acts.last().unwrap().clone();

        let (neck_cache, necked) = match &self.neck {
            None => (None, features.clone()),
            Some(neck) => {
                let d = self.feat_dim;
                let (mean, var) = match mode {
                    ForwardMode::Training => {
                        let mut mean = vec![0.0; d];
                        for row in features.iter_rows() {
                            for (mu, v) in mean.iter_mut().zip(row) {
                                *mu += v;
                            }
                        }
                        for mu in &mut mean {
                            *mu /= m as f64;
                        }
                        let mut var = vec![0.0; d];
                        for row in features.iter_rows() {
                            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                                let dlt = v - mu;
                                *s += dlt * dlt;
                            }
                        }
                        for s in &mut var {
                            *s /= m as f64;
                        }
                        (mean, var)
                    }
                    ForwardMode::Inference => {
                        (neck.running_mean.clone(), neck.running_var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NECK_EPS).sqrt()).collect();
                let mut xhat = Matrix::zeros(m, d);
                let mut out = Matrix::zeros(m, d);
                for i in 0..m {
                    let f = features.row(i);
                    for j in 0..d {
                        let xh = (f[j] - mean[j]) * inv_std[j];
                        xhat.set(i, j, xh);
                        out.set(i, j, neck.gamma[j] * xh + neck.beta[j]);
                    }
                }
                (
                    Some(NeckCache {
                        mean,
                        var,
                        inv_std,
                        xhat,
                    }),
                    out,
                )
            }
        };

        let logits = matmul_nt(&necked, &self.classifier);
        let probs = softmax_rows(&logits);

        Ok(ForwardCache {
            mode,
            post_acts,
            pre_acts,
            features,
            neck: neck_cache,
            necked,
            logits,
            probs,
        })
    }

    /// Folds a training-mode cache's batch statistics into the running ones:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let (Some(neck), Some(nc)) = (self.neck.as_mut(), cache.neck.as_ref()) else {
            return;
        };
        debug_assert_eq!(cache.mode, ForwardMode::Training);
        for (r, b) in neck.running_mean.iter_mut().zip(&nc.mean) {
            *r = (1.0 - NECK_MOMENTUM) * *r + NECK_MOMENTUM * b;
        }
        for (r, b) in neck.running_var.iter_mut().zip(&nc.var) {
            *r = (1.0 - NECK_MOMENTUM) * *r + NECK_MOMENTUM * b;
        }
    }

    /// Backpropagates upstream gradients on the pre-neck features (metric
    /// losses) and on the logits (classification) down to every parameter.
    /// Either upstream may be absent.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_features_ext: Option<&Matrix>,
        d_logits: Option<&Matrix>,
    ) -> Result<GradientSet> {
        let m = cache.features.rows();
        let d = self.feat_dim;
        if let Some(g) = d_features_ext {
            if g.rows() != m || g.cols() != d {
                return Err(Error::Shape(format!(
                    "feature gradient is {}x{}, expected {}x{}",
                    g.rows(),
                    g.cols(),
                    m,
                    d
                )));
            }
        }
        if let Some(g) = d_logits {
            if g.rows() != m || g.cols() != self.num_classes {
                return Err(Error::Shape(format!(
                    "logit gradient is {}x{}, expected {}x{}",
                    g.rows(),
                    g.cols(),
                    m,
                    self.num_classes
                )));
            }
        }

        let mut grads = GradientSet::zeros_like(self);

        // Classifier path: logits = necked @ W_cls^T.
        let mut d_necked = Matrix::zeros(m, d);
        if let Some(dl) = d_logits {
            for c in 0..self.num_classes {
                for j in 0..d {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += dl.get(i, c) * cache.necked.get(i, j);
                    }
                    grads.classifier.set(c, j, acc);
                }
            }
            for i in 0..m {
                let dli = dl.row(i);
                let dni = d_necked.row_mut(i);
                for (c, &g) in dli.iter().enumerate() {
                    if g != 0.0 {
                        let wrow = self.classifier.row(c);
                        for (dn, w) in dni.iter_mut().zip(wrow) {
                            *dn += g * w;
                        }
                    }
                }
            }
        }

        // Neck backward (or passthrough when absent).
        let mut d_features = match (&self.neck, &cache.neck) {
            (None, _) => d_necked,
            (Some(neck), Some(nc)) => {
                let (dgamma, dbeta) = grads.neck.as_mut().unwrap();
                for i in 0..m {
                    let dy = d_necked.row(i);
                    let xh = nc.xhat.row(i);
                    for j in 0..d {
                        dgamma[j] += dy[j] * xh[j];
                        dbeta[j] += dy[j];
                    }
                }
                let mut out = Matrix::zeros(m, d);
                match cache.mode {
                    ForwardMode::Training => {
                        // Batch statistics depend on the features, so the
                        // reduction terms appear: dx = inv_std/m *
                        // (m*dxh - sum(dxh) - xhat * sum(dxh*xhat)).
                        let mut sum_dxh = vec![0.0; d];
                        let mut sum_dxh_xh = vec![0.0; d];
                        for i in 0..m {
                            let dy = d_necked.row(i);
                            let xh = nc.xhat.row(i);
                            for j in 0..d {
                                let dxh = dy[j] * neck.gamma[j];
                                sum_dxh[j] += dxh;
                                sum_dxh_xh[j] += dxh * xh[j];
                            }
                        }
                        let mf = m as f64;
                        for i in 0..m {
                            let dy = d_necked.row(i);
                            let xh = nc.xhat.row(i);
                            let dst = out.row_mut(i);
                            for j in 0..d {
                                let dxh = dy[j] * neck.gamma[j];
                                dst[j] = nc.inv_std[j] / mf
                                    * (mf * dxh - sum_dxh[j] - xh[j] * sum_dxh_xh[j]);
                            }
                        }
                    }
                    ForwardMode::Inference => {
                        // Running statistics are constants.
                        for i in 0..m {
                            let dy = d_necked.row(i);
                            let dst = out.row_mut(i);
                            for j in 0..d {
                                dst[j] = dy[j] * neck.gamma[j] * nc.inv_std[j];
                            }
                        }
                    }
                }
                out
            }
            (Some(_), None) => {
                return Err(Error::Shape(
                    "cache has no neck statistics but the model has a neck".into(),
                ))
            }
        };

        if let Some(ext) = d_features_ext {
            for (dst, src) in d_features.data_mut().iter_mut().zip(ext.data()) {
                *dst += src;
            }
        }

        // MLP backward. post_acts[l] is the input of layer l.
        let num_layers = self.layers.len();
        let mut d_out = d_features;
        for l in (0..num_layers).rev() {
            // ReLU applies to every layer except the last.
            if l + 1 < num_layers {
                let z = &cache.pre_acts[l];
                for (g, &zv) in d_out.data_mut().iter_mut().zip(z.data()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let a_in = &cache.post_acts[l];
            let layer = &self.layers[l];
            let (out_dim, in_dim) = (layer.w.rows(), layer.w.cols());
            let g = &mut grads.layers[l];
            for o in 0..out_dim {
                let mut db = 0.0;
                for i in 0..m {
                    db += d_out.get(i, o);
                }
                g.b[o] = db;
            }
            for o in 0..out_dim {
                let wrow = g.w.row_mut(o);
                for i in 0..m {
                    let gz = d_out.get(i, o);
                    if gz != 0.0 {
                        let ai = a_in.row(i);
                        for (dst, &av) in wrow.iter_mut().zip(ai) {
                            *dst += gz * av;
                        }
                    }
                }
            }
            if l > 0 {
                let mut d_in = Matrix::zeros(m, in_dim);
                for i in 0..m {
                    let dst = d_in.row_mut(i);
                    for o in 0..out_dim {
                        let gz = d_out.get(i, o);
                        if gz != 0.0 {
                            let wrow = layer.w.row(o);
                            for (dv, &wv) in dst.iter_mut().zip(wrow) {
                                *dv += gz * wv;
                            }
                        }
                    }
                }
                d_out = d_in;
            }
        }

        Ok(grads)
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            n += l.w.data().len() + l.b.len();
        }
        if let Some(neck) = &self.neck {
            n += neck.gamma.len() + neck.beta.len();
        }
        n + self.classifier.data().len()
    }

    /// Flat parameter view in a fixed order: per layer weights then bias,
    /// neck gamma then beta, classifier. [`GradientSet::param`] mirrors it.
    pub fn param(&self, idx: usize) -> f64 {
        *self.locate(idx)
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        self.locate_mut(idx)
    }

    fn locate(&self, mut idx: usize) -> &f64 {
        for l in &self.layers {
            let nw = l.w.data().len();
            if idx < nw {
                return &l.w.data()[idx];
            }
            idx -= nw;
            if idx < l.b.len() {
                return &l.b[idx];
            }
            idx -= l.b.len();
        }
        if let Some(neck) = &self.neck {
            if idx < neck.gamma.len() {
                return &neck.gamma[idx];
            }
            idx -= neck.gamma.len();
            if idx < neck.beta.len() {
                return &neck.beta[idx];
            }
            idx -= neck.beta.len();
        }
        &self.classifier.data()[idx]
    }

    fn locate_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.w.data().len();
            if idx < nw {
                return &mut l.w.data_mut()[idx];
            }
            idx -= nw;
            if idx < l.b.len() {
                return &mut l.b[idx];
            }
            idx -= l.b.len();
        }
        if let Some(neck) = &mut self.neck {
            if idx < neck.gamma.len() {
                return &mut neck.gamma[idx];
            }
            idx -= neck.gamma.len();
            if idx < neck.beta.len() {
                return &mut neck.beta[idx];
            }
            idx -= neck.beta.len();
        }
        let n = idx;
        &mut self.classifier.data_mut()[n]
    }

    /// Embeds a whole dataset in inference mode, preserving sample order.
    pub fn embed_dataset(&self, d: &Dataset, batch_size: usize) -> Result<EmbeddingBatch> {
        self.embed_dataset_with_probs(d, batch_size).map(|(e, _)| e)
    }

    /// Same as [`EncoderModel::embed_dataset`] but also returns the softmax
    /// class probabilities per sample (used by confidence-weighted anchor
    /// aggregation).
    pub fn embed_dataset_with_probs(
        &self,
        d: &Dataset,
        batch_size: usize,
    ) -> Result<(EmbeddingBatch, Matrix)> {
        if d.input_dim != self.input_dim {
            return Err(Error::Shape(format!(
                "dataset dimension {} does not match model input {}",
                d.input_dim, self.input_dim
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let n = d.len();
        let mut features = Matrix::zeros(n, self.feat_dim);
        let mut probs = Matrix::zeros(n, self.num_classes);
        let mut labels = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        for (start, chunk) in d.samples.chunks(batch_size).enumerate() {
            let offset = start * batch_size;
            let mut x = Matrix::zeros(chunk.len(), self.input_dim);
            for (i, s) in chunk.iter().enumerate() {
                x.row_mut(i).copy_from_slice(&s.x);
            }
            let cache = self.forward(&x, ForwardMode::Inference)?;
            for i in 0..chunk.len() {
                features
                    .row_mut(offset + i)
                    .copy_from_slice(cache.features.row(i));
                probs.row_mut(offset + i).copy_from_slice(cache.probs.row(i));
            }
        }
        for s in &d.samples {
            labels.push(s.y);
            groups.push(s.group);
        }
        Ok((
            EmbeddingBatch {
                features,
                labels,
                groups,
                num_classes: d.num_classes,
            },
            probs,
        ))
    }
}

/// Embedded features for a whole dataset, in dataset order.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub groups: Vec<Option<u32>>,
    pub num_classes: usize,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn affine_forward(a: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let (m, out_dim) = (a.rows(), w.rows());
    let mut z = Matrix::zeros(m, out_dim);
    for i in 0..m {
        let ai = a.row(i);
        let zi = z.row_mut(i);
        for (o, zv) in zi.iter_mut().enumerate() {
            let wrow = w.row(o);
            let mut acc = b[o];
            for (&av, &wv) in ai.iter().zip(wrow) {
                acc += av * wv;
            }
            *zv = acc;
        }
    }
    z
}

/// `a @ b^T` for row-major `a: m x k`, `b: n x k`.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, n, k) = (a.rows(), b.rows(), a.cols());
    debug_assert_eq!(b.cols(), k);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let ai = a.row(i);
        let oi = out.row_mut(i);
        for (j, ov) in oi.iter_mut().enumerate() {
            let bj = b.row(j);
            let mut acc = 0.0;
            for (&av, &bv) in ai.iter().zip(bj) {
                acc += av * bv;
            }
            *ov = acc;
        }
    }
    out
}

/// Row-wise stable softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(i);
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            z += e;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

pub const CHECKPOINT_MAGIC: &str = "anchorset-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub config_hash: String,
    /// Number of completed training epochs when the snapshot was taken.
    pub epoch: usize,
    pub model: EncoderModel,
}

pub fn save_checkpoint(
    model: &EncoderModel,
    epoch: usize,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    let ckpt = Checkpoint {
        magic: CHECKPOINT_MAGIC.to_string(),
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        epoch,
        model: model.clone(),
    };
    let mut text = serde_json::to_string(&ckpt)?;
    text.push('\n');
    crate::util::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{} is not a valid checkpoint: {e}", path.display())))?;
    if ckpt.magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic '{}', expected '{CHECKPOINT_MAGIC}'",
            path.display(),
            ckpt.magic
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            ckpt.version
        )));
    }
    Ok(ckpt)
}
