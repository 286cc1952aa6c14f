//! Desk-scale supervised models: logistic regression and small MLPs, local
//! SGD training, evaluation, and weighted parameter averaging.
//!
//! All operations are pure with respect to their inputs and deterministic
//! given a seed, so callers may parallelize across clients freely.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat real-valued model parameter vector; the unit of aggregation,
/// grouping, and distance computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps a raw vector, rejecting NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "parameter {i} is not finite: {}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Componentwise difference, used for update directions.
    pub fn delta_from(&self, base: &ParamVector) -> Result<Vec<f64>> {
        if self.dim() != base.dim() {
            return Err(Error::config(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                base.dim()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&base.values)
            .map(|(a, b)| a - b)
            .collect())
    }
}

/// Server-side validation measurement: exact accuracy and mean loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub accuracy: f64,
    pub loss: f64,
}

/// In-memory labeled dataset with a flat row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_rows: usize,
    num_features: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let num_rows = labels.len();
        if num_rows == 0 {
            return Err(Error::config("dataset must contain at least one row"));
        }
        if features.len() != num_rows * num_features {
            return Err(Error::config(format!(
                "feature matrix has {} entries, expected {} rows x {} columns",
                features.len(),
                num_rows,
                num_features
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite feature value"));
        }
        Ok(Self {
            features,
            labels,
            num_rows,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.num_rows
    }

    pub fn is_empty(&self) -> bool {
        self.num_rows == 0
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset containing the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("subset must contain at least one row"));
        }
        let mut features = Vec::with_capacity(rows.len() * self.num_features);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.num_features, self.num_classes)
    }

    /// Replaces the labels wholesale (noise injection, attacks).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            labels,
            self.num_features,
            self.num_classes,
        )
    }
}

/// Model architecture. `Logistic` is multinomial logistic regression in the
/// reference-class form: (C-1)*(d+1) parameters, the last class logit pinned
/// at zero. `Mlp` uses tanh hidden layers and a full C-row linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: Vec<usize> },
}

impl ModelKind {
    /// Total parameter count for `d` input features and `c` classes.
    pub fn param_dim(&self, d: usize, c: usize) -> usize {
        match self {
            ModelKind::Logistic => (c - 1) * (d + 1),
            ModelKind::Mlp { hidden } => {
                let mut dim = 0;
                let mut prev = d;
                for &h in hidden {
                    dim += h * prev + h;
                    prev = h;
                }
                dim + c * prev + c
            }
        }
    }

    /// Deterministic initial parameters. Logistic starts at zero; MLP layers
    /// draw seeded normals scaled by 1/sqrt(fan_in) with zero biases.
    pub fn init_params(&self, d: usize, c: usize, seed: u64) -> ParamVector {
        match self {
            ModelKind::Logistic => ParamVector::zeros(self.param_dim(d, c)),
            ModelKind::Mlp { hidden } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut values = Vec::with_capacity(self.param_dim(d, c));
                let mut prev = d;
                for &h in hidden.iter().chain(std::iter::once(&c)) {
                    let scale = 1.0 / (prev as f64).sqrt();
                    for _ in 0..h * prev {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        values.push(z * scale);
                    }
                    values.extend(std::iter::repeat(0.0).take(h));
                    prev = h;
                }
                ParamVector { values }
            }
        }
    }

    /// Class logits for one input row.
    pub fn logits(&self, params: &[f64], x: &[f64], c: usize) -> Vec<f64> {
        match self {
            ModelKind::Logistic => {
                let d = x.len();
                let mut z = Vec::with_capacity(c);
                for row in 0..c - 1 {
                    let w = &params[row * (d + 1)..(row + 1) * (d + 1)];
                    let mut acc = w[d];
                    for (wi, xi) in w[..d].iter().zip(x) {
                        acc += wi * xi;
                    }
                    z.push(acc);
                }
                z.push(0.0);
                z
            }
            ModelKind::Mlp { hidden } => {
                let mut act = x.to_vec();
                let mut offset = 0;
                let mut prev = x.len();
                for (li, &h) in hidden.iter().chain(std::iter::once(&c)).enumerate() {
                    let is_output = li == hidden.len();
                    let mut next = Vec::with_capacity(h);
                    for row in 0..h {
                        let w = &params[offset + row * prev..offset + (row + 1) * prev];
                        let b = params[offset + h * prev + row];
                        let mut acc = b;
                        for (wi, ai) in w.iter().zip(&act) {
                            acc += wi * ai;
                        }
                        next.push(if is_output { acc } else { acc.tanh() });
                    }
                    offset += h * prev + h;
                    prev = h;
                    act = next;
                }
                act
            }
        }
    }
}

/// Hyperparameters for local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub model_kind: ModelKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if let ModelKind::Mlp { hidden } = &self.model_kind {
            if hidden.iter().any(|&h| h == 0) {
                return Err(Error::config("hidden layer sizes must be positive"));
            }
        }
        Ok(())
    }
}

/// Numerically stable log(sum(exp(z))).
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy loss of one example plus its parameter gradient, added into
/// `grad`. Returns the example loss.
fn grad_example(
    kind: &ModelKind,
    params: &[f64],
    x: &[f64],
    y: usize,
    c: usize,
    grad: &mut [f64],
) -> f64 {
    match kind {
        ModelKind::Logistic => {
            let d = x.len();
            let z = kind.logits(params, x, c);
            let lse = log_sum_exp(&z);
            let loss = lse - z[y];
            for row in 0..c - 1 {
                let p = (z[row] - lse).exp();
                let err = p - if y == row { 1.0 } else { 0.0 };
                let g = &mut grad[row * (d + 1)..(row + 1) * (d + 1)];
                for (gi, xi) in g[..d].iter_mut().zip(x) {
                    *gi += err * xi;
                }
                g[d] += err;
            }
            loss
        }
        ModelKind::Mlp { hidden } => {
            // Forward pass keeping every activation for backprop.
            let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
            let mut offsets = Vec::new();
            let mut offset = 0;
            let mut prev = x.len();
            for (li, &h) in hidden.iter().chain(std::iter::once(&c)).enumerate() {
                let is_output = li == hidden.len();
                offsets.push(offset);
                let act = acts.last().unwrap();
                let mut next = Vec::with_capacity(h);
                for row in 0..h {
                    let w = &params[offset + row * prev..offset + (row + 1) * prev];
                    let b = params[offset + h * prev + row];
                    let mut acc = b;
                    for (wi, ai) in w.iter().zip(act) {
                        acc += wi * ai;
                    }
                    next.push(if is_output { acc } else { acc.tanh() });
                }
                offset += h * prev + h;
                prev = h;
                acts.push(next);
            }

            let z = acts.last().unwrap();
            let lse = log_sum_exp(z);
            let loss = lse - z[y];
            let mut dz: Vec<f64> = z
                .iter()
                .enumerate()
                .map(|(i, &zi)| (zi - lse).exp() - if i == y { 1.0 } else { 0.0 })
                .collect();

            let widths: Vec<usize> = hidden.iter().cloned().chain(std::iter::once(c)).collect();
            for li in (0..widths.len()).rev() {
                let h = widths[li];
                let input = &acts[li];
                let prev_w = input.len();
                let base = offsets[li];
                let mut dinput = vec![0.0; prev_w];
                for row in 0..h {
                    let w = &params[base + row * prev_w..base + (row + 1) * prev_w];
                    let g = &mut grad[base + row * prev_w..base + (row + 1) * prev_w];
                    let dzr = dz[row];
                    for j in 0..prev_w {
                        g[j] += dzr * input[j];
                        dinput[j] += dzr * w[j];
                    }
                    grad[base + h * prev_w + row] += dzr;
                }
                if li > 0 {
                    // tanh'(z) = 1 - tanh(z)^2 and acts[li] already holds tanh(z).
                    dz = dinput
                        .iter()
                        .zip(&acts[li])
                        .map(|(di, ai)| di * (1.0 - ai * ai))
                        .collect();
                }
            }
            loss
        }
    }
}

/// Runs `cfg.local_epochs` epochs of mini-batch SGD with momentum and weight
/// decay on cross-entropy loss, starting from `start`. Batches are shuffled
/// per epoch from a stream seeded by `seed`; identical inputs give
/// bit-identical outputs. `start` is not mutated.
pub fn train_local(
    start: &ParamVector,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParamVector> {
    cfg.validate()?;
    let d = data.num_features();
    let c = data.num_classes();
    let expected = cfg.model_kind.param_dim(d, c);
    if start.dim() != expected {
        return Err(Error::config(format!(
            "start vector has {} parameters, model expects {expected}",
            start.dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = start.values.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += grad_example(
                    &cfg.model_kind,
                    &params,
                    data.row(i),
                    data.label(i),
                    c,
                    &mut grad,
                );
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            for ((w, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                let step = g * scale + cfg.weight_decay * *w;
                *v = cfg.momentum * *v + step;
                *w -= cfg.learning_rate * *v;
            }
        }
    }

    ParamVector::new(params)
}

/// Exact accuracy and mean cross-entropy loss of `model` over `data`.
/// Prediction is argmax over logits with ties broken toward the lower index.
pub fn evaluate(kind: &ModelKind, model: &ParamVector, data: &LabeledDataset) -> Result<Utility> {
    let d = data.num_features();
    let c = data.num_classes();
    if model.dim() != kind.param_dim(d, c) {
        return Err(Error::config(format!(
            "model has {} parameters, architecture expects {}",
            model.dim(),
            kind.param_dim(d, c)
        )));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.len() {
        let z = kind.logits(model.values(), data.row(i), c);
        let lse = log_sum_exp(&z);
        loss += lse - z[data.label(i)];
        let mut best = 0;
        for j in 1..c {
            if z[j] > z[best] {
                best = j;
            }
        }
        if best == data.label(i) {
            correct += 1;
        }
    }
    Ok(Utility {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

/// FedAvg-style weighted mean of parameter vectors: sum(w_i * m_i) / sum(w_i).
pub fn weighted_average(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if models.is_empty() {
        return Err(Error::config("weighted_average over empty model list"));
    }
    if models.len() != weights.len() {
        return Err(Error::config(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::config("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("weights must sum to a positive value"));
    }
    let dim = models[0].dim();
    if models.iter().any(|m| m.dim() != dim) {
        return Err(Error::config("models must share one dimension"));
    }
    // Normalized weights keep a singleton aggregate bitwise equal to its
    // member (w/total == 1.0 exactly).
    let mut acc = vec![0.0; dim];
    for (m, &w) in models.iter().zip(weights) {
        let frac = w / total;
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += frac * v;
        }
    }
    ParamVector::new(acc)
}
