//! Class-weighted softmax head trained over frozen embeddings.
//!
//! All arithmetic is `f64`. Training is mini-batch gradient descent with
//! classical momentum, shuffled by a seeded ChaCha stream, so a fixed
//! `(data, config)` pair always yields bit-identical parameters.
//!
//! Model file (`ALHD1`, little-endian):
//!
//! ```text
//! "ALHD1" | u32 K | u32 d | K×d f64 W (row-major) | K f64 b | K × (u16 len | UTF-8 name)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingStore;

pub const MODEL_MAGIC: &[u8; 5] = b"ALHD1";

#[derive(Error, Debug)]
pub enum ClassifierError {
    #[error("non-finite input to softmax")]
    NonFinite,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {class} has no examples; inverse-frequency weights need every count >= 1")]
    ZeroCount { class: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss} (learning rate too high?)")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unknown crop ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>, ClassifierError> {
    if z.is_empty() || !z.iter().all(|v| v.is_finite()) {
        return Err(ClassifierError::NonFinite);
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Log-sum-exp split into the max logit and `ln(1 + Σ exp(z_j - max))`
/// over the non-max entries, so `lse - z_max` stays exact for confident rows.
fn log_sum_exp_parts(z: &[f64]) -> (f64, f64) {
    let top = argmax(z);
    let m = z[top];
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m, rest.ln_1p())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    class_names: Vec<String>,
    dim: usize,
    /// K×d, row-major by class.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl HeadModel {
    /// All-zero parameters.
    pub fn zeros(class_names: Vec<String>, dim: usize) -> Result<Self, ClassifierError> {
        let k = class_names.len();
        Self::from_parts(class_names, dim, vec![0.0; k * dim], vec![0.0; k])
    }

    pub fn from_parts(
        class_names: Vec<String>,
        dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, ClassifierError> {
        let k = class_names.len();
        if k == 0 {
            return Err(ClassifierError::InvalidModel("no classes".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = class_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(ClassifierError::InvalidModel(format!("duplicate class {dup:?}")));
        }
        if weights.len() != k * dim || bias.len() != k {
            return Err(ClassifierError::InvalidModel(format!(
                "parameter shapes ({}, {}) do not match K={k}, d={dim}",
                weights.len(),
                bias.len()
            )));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(ClassifierError::InvalidModel("non-finite parameter".into()));
        }
        Ok(HeadModel {
            class_names,
            dim,
            weights,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// `z = W e + b`.
    pub fn logits(&self, e: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        if e.len() != self.dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim,
                actual: e.len(),
            });
        }
        Ok(self.logits_unchecked(e))
    }

    fn logits_unchecked(&self, e: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim.max(1))
            .take(self.num_classes())
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(e).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, e: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        softmax(&self.logits(e)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(13 + 8 * (self.weights.len() + self.bias.len()));
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.class_names {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClassifierError> {
        let bad = |m: &str| ClassifierError::InvalidModel(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ClassifierError> {
            if bytes.len() - pos < n {
                return Err(bad("truncated model file"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(5)? != MODEL_MAGIC {
            return Err(bad("missing ALHD1 magic"));
        }
        let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut read_f64s = |n: usize| -> Result<Vec<f64>, ClassifierError> {
            let raw = take(n.checked_mul(8).ok_or_else(|| bad("oversized model"))?)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weights = read_f64s(k * dim)?;
        let bias = read_f64s(k)?;
        let mut names = Vec::with_capacity(k);
        for _ in 0..k {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad("class name is not UTF-8"))?;
            names.push(name.to_string());
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after class names"));
        }
        Self::from_parts(names, dim, weights, bias)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    None,
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights(vec![1.0; k])
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_c = min(cap, N / (K n_c))` for inverse frequency, all ones otherwise.
pub fn class_weights(counts: &[usize], mode: WeightMode, cap: f64) -> Result<ClassWeights, ClassifierError> {
    match mode {
        WeightMode::None => Ok(ClassWeights::uniform(counts.len())),
        WeightMode::InverseFrequency => {
            if let Some(class) = counts.iter().position(|&n| n == 0) {
                return Err(ClassifierError::ZeroCount { class });
            }
            let total: usize = counts.iter().sum();
            let k = counts.len() as f64;
            Ok(ClassWeights(
                counts
                    .iter()
                    .map(|&n| (total as f64 / (k * n as f64)).min(cap))
                    .collect(),
            ))
        }
    }
}

/// Like [`class_weights`] but tolerates classes absent from a partially
/// labeled set: the frequency ratio is taken over the classes present and
/// absent classes get weight 1 (they contribute no loss terms anyway).
pub fn class_weights_for_present(counts: &[usize], mode: WeightMode, cap: f64) -> ClassWeights {
    if mode == WeightMode::None {
        return ClassWeights::uniform(counts.len());
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
    let total: usize = present.iter().sum();
    let k = present.len().max(1) as f64;
    ClassWeights(
        counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    1.0
                } else {
                    (total as f64 / (k * n as f64)).min(cap)
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        LabeledExample { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// K×d, row-major like the model.
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Weighted mean cross-entropy plus `(λ/2)‖W‖²` and its exact gradient.
pub fn loss_and_grad(
    model: &HeadModel,
    batch: &[LabeledExample],
    weights: &ClassWeights,
    l2_lambda: f64,
) -> Result<LossGrad, ClassifierError> {
    check_batch(model, batch.iter(), weights)?;
    Ok(weighted_loss_grad(model, batch.iter(), batch.len(), weights, l2_lambda, true))
}

fn check_batch<'a>(
    model: &HeadModel,
    batch: impl ExactSizeIterator<Item = &'a LabeledExample>,
    weights: &ClassWeights,
) -> Result<(), ClassifierError> {
    if batch.len() == 0 {
        return Err(ClassifierError::EmptyBatch);
    }
    let k = model.num_classes();
    if weights.len() != k {
        return Err(ClassifierError::InvalidConfig(format!(
            "{} class weights for {k} classes",
            weights.len()
        )));
    }
    for ex in batch {
        if ex.label >= k {
            return Err(ClassifierError::LabelOutOfRange {
                label: ex.label,
                classes: k,
            });
        }
        if ex.features.len() != model.dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: model.dim,
                actual: ex.features.len(),
            });
        }
    }
    Ok(())
}

fn weighted_loss_grad<'a>(
    model: &HeadModel,
    batch: impl Iterator<Item = &'a LabeledExample>,
    n: usize,
    weights: &ClassWeights,
    l2_lambda: f64,
    with_grad: bool,
) -> LossGrad {
    let k = model.num_classes();
    let d = model.dim;
    let inv_n = 1.0 / n as f64;
    let (mut grad_w, mut grad_b) = if with_grad {
        (vec![0.0; k * d], vec![0.0; k])
    } else {
        (Vec::new(), Vec::new())
    };
    let mut data_loss = 0.0;

    for ex in batch {
        let z = model.logits_unchecked(&ex.features);
        let (m, tail) = log_sum_exp_parts(&z);
        let lse = m + tail;
        let w_y = weights.get(ex.label);
        data_loss += w_y * ((m - z[ex.label]) + tail);
        if !with_grad {
            continue;
        }
        let scale = w_y * inv_n;
        for (c, zc) in z.iter().enumerate() {
            let p = (zc - lse).exp();
            let dz = scale * (p - if c == ex.label { 1.0 } else { 0.0 });
            grad_b[c] += dz;
            for (g, x) in grad_w[c * d..(c + 1) * d].iter_mut().zip(&ex.features) {
                *g += dz * x;
            }
        }
    }

    let sq: f64 = model.weights.iter().map(|w| w * w).sum();
    if with_grad && l2_lambda != 0.0 {
        for (g, w) in grad_w.iter_mut().zip(&model.weights) {
            *g += l2_lambda * w;
        }
    }
    LossGrad {
        loss: data_loss * inv_n + 0.5 * l2_lambda * sq,
        grad_w,
        grad_b,
    }
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_mode: WeightMode,
    pub weight_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            l2_lambda: 1e-4,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            weight_mode: WeightMode::InverseFrequency,
            weight_cap: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let fail = |m: String| Err(ClassifierError::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return fail(format!("l2_lambda {} must be finite and >= 0", self.l2_lambda));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.weight_cap.is_finite() && self.weight_cap > 0.0) {
            return fail(format!("weight_cap {} must be > 0", self.weight_cap));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Full-batch loss evaluated at the start of each epoch.
    pub epoch_start_loss: Vec<f64>,
    pub final_loss: f64,
}

/// Trains from `init` on `data` with momentum SGD. Example order matters for
/// reproducibility: callers that want order-independence should sort first.
pub fn train(
    init: &HeadModel,
    data: &[LabeledExample],
    config: &TrainConfig,
    weights: &ClassWeights,
) -> Result<(HeadModel, TrainHistory), ClassifierError> {
    config.validate()?;
    check_batch(init, data.iter(), weights)?;

    let mut model = init.clone();
    let mut vel_w = vec![0.0; model.weights.len()];
    let mut vel_b = vec![0.0; model.bias.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    let full_loss = |m: &HeadModel| {
        weighted_loss_grad(m, data.iter(), data.len(), weights, config.l2_lambda, false).loss
    };

    for epoch in 0..config.epochs {
        let loss = full_loss(&model);
        if !loss.is_finite() {
            return Err(ClassifierError::Diverged { epoch, loss });
        }
        history.epoch_start_loss.push(loss);

        order.shuffle(&mut rng);
        for chunk in balanced_batches(&order, config.batch_size) {
            let g = weighted_loss_grad(
                &model,
                chunk.iter().map(|&i| &data[i]),
                chunk.len(),
                weights,
                config.l2_lambda,
                true,
            );
            step(&mut model.weights, &mut vel_w, &g.grad_w, config);
            step(&mut model.bias, &mut vel_b, &g.grad_b, config);
        }
        if !model.weights.iter().chain(&model.bias).all(|v| v.is_finite()) {
            return Err(ClassifierError::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
    }

    history.final_loss = full_loss(&model);
    if !history.final_loss.is_finite() {
        return Err(ClassifierError::Diverged {
            epoch: config.epochs,
            loss: history.final_loss,
        });
    }
    Ok((model, history))
}

/// Splits `order` into `ceil(n / max)` consecutive batches whose sizes differ
/// by at most one, so no epoch ends on a tiny, high-variance tail batch.
pub fn balanced_batches(order: &[usize], max: usize) -> impl Iterator<Item = &[usize]> {
    let n = order.len();
    let count = n.div_ceil(max.max(1));
    let (base, extra) = n.checked_div(count).map_or((0, 0), |base| (base, n % count));
    let mut start = 0;
    (0..count).map(move |i| {
        let len = base + usize::from(i < extra);
        let chunk = &order[start..start + len];
        start += len;
        chunk
    })
}

fn step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], config: &TrainConfig) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = config.momentum * *v - config.learning_rate * g;
        *p += *v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub crop_id: String,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
}

impl PredictionRecord {
    pub fn from_features(model: &HeadModel, crop_id: &str, e: &[f64]) -> Result<Self, ClassifierError> {
        let logits = model.logits(e)?;
        let probs = softmax(&logits)?;
        let predicted = argmax(&probs);
        Ok(PredictionRecord {
            crop_id: crop_id.to_string(),
            confidence: probs[predicted],
            logits,
            probs,
            predicted,
        })
    }
}

/// Predicts every id in order. Any id missing from the store fails the call
/// with the full list of missing ids.
pub fn predict(
    model: &HeadModel,
    store: &EmbeddingStore,
    ids: &[String],
) -> Result<Vec<PredictionRecord>, ClassifierError> {
    if store.dim() != model.dim() {
        return Err(ClassifierError::DimensionMismatch {
            expected: model.dim(),
            actual: store.dim(),
        });
    }
    let missing: Vec<String> = ids.iter().filter(|id| !store.contains(id)).cloned().collect();
    if !missing.is_empty() {
        return Err(ClassifierError::UnknownIds(missing));
    }
    ids.iter()
        .map(|id| {
            let e = store.vector(id).expect("checked above").values;
            PredictionRecord::from_features(model, id, &e)
        })
        .collect()
}
