//! Cross-entropy training with Adam, early stopping and prediction.

use std::fmt::Write as _;

use evowarn::dataset::{split_indices, DatasetError, DatasetFile, Label, TrainSet};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, Tape};
use crate::neural::{Model, ModelError, ModelSpec};
use crate::tensor::Tensor;
use crate::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training data must contain both labels; {0} is missing")]
    SingleClass(Label),
    #[error("training data is empty")]
    Empty,
    #[error("samples have window {found}, model expects {expected}")]
    WindowMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Oversample the minority class each epoch.
    #[serde(default)]
    pub rebalance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 5,
            validation_fraction: 0.1,
            seed: 0,
            rebalance: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("batch_size, max_epochs and early_stop_patience must be positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} outside (0, 1)", self.validation_fraction));
        }
        Ok(())
    }
}

/// Normalized inputs `[n, ws, channels]` with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub ws: usize,
    pub channels: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<Label>,
}

impl Samples {
    pub fn new(ws: usize, channels: usize, inputs: Vec<f64>, labels: Vec<Label>) -> Result<Self, TrainError> {
        if inputs.len() != ws * channels * labels.len() {
            return Err(TensorError::DataLength { shape: vec![labels.len(), ws, channels], len: inputs.len() }.into());
        }
        Ok(Self { ws, channels, inputs, labels })
    }

    pub fn from_dataset(dataset: &DatasetFile) -> Self {
        let ws = dataset.header.ws;
        let channels = evowarn::dataset::CHANNELS;
        let mut inputs = Vec::with_capacity(dataset.len() * ws * channels);
        for i in 0..dataset.len() {
            inputs.extend(dataset.features(i));
        }
        let labels = dataset.records.iter().map(|r| r.label).collect();
        Self { ws, channels, inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self) -> usize {
        self.ws * self.channels
    }

    /// Batch tensor for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let row = self.row();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.inputs[i * row..(i + 1) * row]);
        }
        Tensor::new(vec![indices.len(), self.ws, self.channels], data).expect("rows have fixed width")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ws: self.ws,
            channels: self.channels,
            inputs: self.batch(indices).into_data(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Labels alternate starting with Recovery. Channel 0 is 0.9 throughout for
/// Collapse and 0.1 for Recovery; the other channels are uniform noise.
pub fn separable_samples(n: usize, ws: usize, seed: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = evowarn::dataset::CHANNELS;
    let mut inputs = Vec::with_capacity(n * ws * channels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Recovery } else { Label::Collapse };
        for _ in 0..ws {
            inputs.push(if label == Label::Collapse { 0.9 } else { 0.1 });
            inputs.extend((1..channels).map(|_| rng.gen_range(0.0..1.0)));
        }
        labels.push(label);
    }
    Samples { ws, channels, inputs, labels }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Loss of every optimizer step's batch, before the step.
    pub step_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
        for e in 0..self.epochs() {
            writeln!(out, "{},{},{},{}", e + 1, self.train_loss[e], self.val_loss[e], self.val_accuracy[e])
                .expect("writing to a String");
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<(), TensorError> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(TensorError::Shape { op: "adam", detail: format!("{} params, {} grads", params.len(), grads.len()) });
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || g.shape() != m.shape() {
                return Err(TensorError::Shape { op: "adam", detail: format!("param {:?}, grad {:?}", p.shape(), g.shape()) });
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in iter {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Largest number of samples pushed through one tape, sized so attention
/// matrices stay well under a gigabyte at long windows.
fn micro_batch(spec: &ModelSpec, batch: usize) -> usize {
    const BUDGET: usize = 4_000_000;
    (BUDGET / (spec.ws * spec.ws.max(spec.hidden_size)).max(1)).clamp(1, batch.max(1))
}

fn class_index(l: Label) -> usize {
    l.index()
}

/// Mean loss over `indices` and its gradient for every parameter, in model order.
fn loss_and_grads(model: &Model, data: &Samples, indices: &[usize]) -> Result<(f64, Vec<Tensor>), TrainError> {
    let chunk = micro_batch(model.spec(), indices.len());
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut loss = 0.0;
    for part in indices.chunks(chunk) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(data.batch(part));
        let logits = model.forward_on(&mut tape, &bound, x)?;
        let labels: Vec<usize> = part.iter().map(|&i| class_index(data.labels[i])).collect();
        let ce = tape.cross_entropy(logits, &labels)?;
        let weight = part.len() as f64 / indices.len() as f64;
        let scaled = tape.scale(ce, weight);
        loss += tape.value(scaled).item();
        let g = tape.backward(scaled)?;
        for (acc, (&v, p)) in grads.iter_mut().zip(bound.vars.iter().zip(model.params())) {
            if let Some(gv) = g.get(v) {
                debug_assert_eq!(gv.shape(), p.value.shape());
                acc.add_assign(gv);
            }
        }
    }
    Ok((loss, grads))
}

/// Logits `[n, 2]` for every sample, computed in chunks.
pub fn logits(model: &Model, data: &Samples) -> Result<Tensor, TrainError> {
    if data.ws != model.spec().ws {
        return Err(TrainError::WindowMismatch { expected: model.spec().ws, found: data.ws });
    }
    let chunk = micro_batch(model.spec(), 256);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * 2);
    for part in all.chunks(chunk) {
        out.extend(model.forward(&data.batch(part))?.into_data());
    }
    Ok(Tensor::new(vec![data.len(), 2], out)?)
}

/// Mean cross-entropy and accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Samples) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let z = logits(model, data)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &label) in z.data().chunks_exact(2).zip(&data.labels) {
        let max = row[0].max(row[1]);
        let lse = max + ((row[0] - max).exp() + (row[1] - max).exp()).ln();
        loss += lse - row[class_index(label)];
        if decide(row).0 == label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Label and its softmax probability; ties go to Recovery.
pub fn decide(logit_row: &[f64]) -> (Label, f64) {
    let mut p = logit_row.to_vec();
    softmax_in_place(&mut p);
    if p[1] > p[0] {
        (Label::Collapse, p[1])
    } else {
        (Label::Recovery, p[0])
    }
}

/// Predictions for a batch `[b, ws, channels]`.
pub fn predict(model: &Model, batch: &Tensor) -> Result<Vec<(Label, f64)>, TrainError> {
    Ok(model.forward(batch)?.data().chunks_exact(2).map(decide).collect())
}

pub fn predict_samples(model: &Model, data: &Samples) -> Result<Vec<Label>, TrainError> {
    Ok(logits(model, data)?.data().chunks_exact(2).map(|r| decide(r).0).collect())
}

/// Trains a fresh model on the training side of a split.
pub fn train(spec: ModelSpec, data: &TrainSet, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_samples(spec, &Samples::from_dataset(&data.0), config)
}

/// Training on in-memory samples, which a [`TrainSet`] converts into.
pub fn train_samples(spec: ModelSpec, data: &Samples, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    if data.ws != spec.ws {
        return Err(TrainError::WindowMismatch { expected: spec.ws, found: data.ws });
    }
    for label in Label::ALL {
        if !data.labels.contains(&label) {
            return Err(TrainError::SingleClass(label));
        }
    }
    let mut model = Model::build(spec)?;
    let (fit_idx, val_idx) = split_indices(&data.labels, config.validation_fraction, config.seed, true)?;
    let fit = data.subset(&fit_idx);
    // tiny sets can leave nothing for validation; fall back to the training data
    let val = if val_idx.is_empty() { fit.clone() } else { data.subset(&val_idx) };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let mut order = epoch_order(&fit.labels, config.rebalance);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = loss_and_grads(&model, &fit, batch)?;
            history.step_loss.push(loss);
            total += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grads)?;
        }
        let (val_loss, val_acc) = evaluate(&model, &val)?;
        history.train_loss.push(total / order.len() as f64);
        history.val_loss.push(val_loss);
        history.val_accuracy.push(val_acc);
        if val_loss < best.0 {
            best = (val_loss, model.clone());
            history.best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { model: best.1, history })
}

fn epoch_order(labels: &[Label], rebalance: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    if rebalance {
        let by_class: Vec<Vec<usize>> =
            Label::ALL.iter().map(|&l| (0..labels.len()).filter(|&i| labels[i] == l).collect()).collect();
        let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
        for class in by_class.iter().filter(|c| !c.is_empty()) {
            order.extend(class.iter().cycle().take(target - class.len()));
        }
    }
    order
}
