//! Layers and the five classifier architectures.
//!
//! Layers are free functions over a [`Tape`]; a [`Model`] owns named
//! parameter tensors and wires them into one of the architectures on each
//! forward pass. Sequence inputs are `[batch, ws, channels]`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, Tape, Var};
use crate::tensor::Tensor;
use crate::TensorError;

pub const SNAPSHOT_VERSION: u32 = 1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model expects windows of {expected} x {channels}, got input shape {found:?}")]
    InputShape { expected: usize, channels: usize, found: Vec<usize> },
    #[error("unknown model kind {0:?}")]
    UnknownKind(String),
    #[error("snapshot version {found} is not supported (expected {SNAPSHOT_VERSION})")]
    SnapshotVersion { found: u32 },
    #[error("snapshot parameters do not match the spec: {0}")]
    SnapshotMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---- layers ---------------------------------------------------------------

/// `activation(x W + b)` with `x: [.., in]`, `W: [in, out]`, `b: [out]`.
pub fn fully_connected(tape: &mut Tape, x: Var, w: Var, b: Var, activation: Activation) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    let y = tape.add(y, b)?;
    Ok(tape.activate(y, activation))
}

/// Gate weights and biases of one LSTM layer, in order forget, input,
/// output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

impl LstmParams {
    pub fn hidden_size(&self, tape: &Tape) -> usize {
        tape.value(self.biases[0]).len()
    }
}

/// One step on `x: [b, in]`; returns `(h, c)`, each `[b, hidden]`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, p: &LstmParams) -> Result<(Var, Var), TensorError> {
    let state = tape.concat(&[h_prev, c_prev])?;
    let next = tape.lstm_cell(x, state, p.weights, p.biases)?;
    split_state(tape, next, p.hidden_size(tape))
}

fn split_state(tape: &mut Tape, state: Var, hidden: usize) -> Result<(Var, Var), TensorError> {
    Ok((tape.slice_last(state, 0, hidden)?, tape.slice_last(state, hidden, hidden)?))
}

/// Runs the cell over every step of `seq: [b, L, in]` from zero state and
/// returns all hidden states `[b, L, hidden]`.
pub fn lstm_layer(tape: &mut Tape, seq: Var, p: &LstmParams) -> Result<Var, TensorError> {
    let s = tape.value(seq).shape().to_vec();
    if s.len() != 3 {
        return Err(TensorError::Shape { op: "lstm_layer", detail: format!("{s:?}") });
    }
    let hidden = p.hidden_size(tape);
    let mut state = tape.leaf(Tensor::zeros(&[s[0], 2 * hidden]));
    let mut outputs = Vec::with_capacity(s[1]);
    for t in 0..s[1] {
        let x = tape.time_step(seq, t)?;
        state = tape.lstm_cell(x, state, p.weights, p.biases)?;
        outputs.push(tape.slice_last(state, 0, hidden)?);
    }
    tape.stack_time(&outputs)
}

/// Valid 1-D cross-correlation along time. `kernel` is `[k * in, out]`,
/// step-major over the window, so `k` is inferred from its row count.
pub fn conv1d(tape: &mut Tape, seq: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
    let channels = tape.value(seq).last_dim();
    let rows = tape.value(kernel).shape()[0];
    if channels == 0 || rows % channels != 0 {
        return Err(TensorError::Shape {
            op: "conv1d",
            detail: format!("kernel {:?} for {channels} input channels", tape.value(kernel).shape()),
        });
    }
    let windows = tape.unfold1d(seq, rows / channels)?;
    fully_connected(tape, windows, kernel, bias, Activation::Identity)
}

/// Valid 2-D cross-correlation of a `[b, H, W]` plane with `kernel:
/// [kh * kw, out]`; returns `[b, H - kh + 1, W - kw + 1, out]`.
pub fn conv2d(tape: &mut Tape, plane: Var, kernel: Var, bias: Var, kh: usize, kw: usize) -> Result<Var, TensorError> {
    if tape.value(kernel).shape().first() != Some(&(kh * kw)) {
        return Err(TensorError::Shape {
            op: "conv2d",
            detail: format!("kernel {:?} for a {kh}x{kw} footprint", tape.value(kernel).shape()),
        });
    }
    let patches = tape.unfold2d(plane, kh, kw)?;
    fully_connected(tape, patches, kernel, bias, Activation::Identity)
}

pub fn maxpool(tape: &mut Tape, seq: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
    tape.maxpool_time(seq, window, stride)
}

/// `softmax((X Wq)(X Wk)^T / sqrt(d)) X Wv` for `x: [b, L, d]`.
pub fn self_attention(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var, TensorError> {
    let (_, weights) = attention_weights(tape, x, wq, wk)?;
    let v = tape.matmul(x, wv)?;
    tape.bmm(weights, v, false)
}

/// Attention matrix `[b, L, L]` alongside the scaled logits.
pub fn attention_weights(tape: &mut Tape, x: Var, wq: Var, wk: Var) -> Result<(Var, Var), TensorError> {
    let d = tape.value(x).last_dim();
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scores);
    Ok((scores, weights))
}

pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Rows `0..ws` of a learnable `[P, d]` position table.
pub fn positional_embedding(tape: &mut Tape, table: Var, ws: usize) -> Result<Var, TensorError> {
    let positions: Vec<usize> = (0..ws).collect();
    tape.embedding(table, &positions)
}

// ---- model specs ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(alias = "SeqLstm")]
    SeqLstm,
    #[serde(alias = "CnnSeqLstm")]
    CnnSeqLstm,
    #[serde(alias = "CnnLstm")]
    CnnLstm,
    #[serde(alias = "TextCnn")]
    TextCnn,
    #[serde(alias = "Transformer")]
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::SeqLstm, ModelKind::CnnSeqLstm, ModelKind::CnnLstm, ModelKind::TextCnn, ModelKind::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SeqLstm => "seq-lstm",
            ModelKind::CnnSeqLstm => "cnn-seq-lstm",
            ModelKind::CnnLstm => "cnn-lstm",
            ModelKind::TextCnn => "text-cnn",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "seqlstm" => ModelKind::SeqLstm,
            "cnnseqlstm" => ModelKind::CnnSeqLstm,
            "cnnlstm" => ModelKind::CnnLstm,
            "textcnn" => ModelKind::TextCnn,
            "transformer" => ModelKind::Transformer,
            _ => return Err(ModelError::UnknownKind(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub ws: usize,
    pub input_channels: usize,
    pub hidden_size: usize,
    pub lstm_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Time extent of the 2-D kernel; its channel extent is always the full input width.
    pub conv2d_time: usize,
    pub text_kernels: Vec<usize>,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub d_model: usize,
    pub ff_width: usize,
    pub encoder_layers: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, ws: usize, seed: u64) -> Self {
        Self {
            kind,
            ws,
            input_channels: evowarn::dataset::CHANNELS,
            hidden_size: 64,
            lstm_layers: 2,
            conv_channels: 32,
            conv_kernel: 3,
            conv2d_time: 3,
            text_kernels: vec![3, 4, 5],
            pool_window: 2,
            pool_stride: 2,
            d_model: 64,
            ff_width: 128,
            encoder_layers: 3,
            seed,
        }
    }

    /// Shortest window the architecture accepts.
    pub fn min_ws(&self) -> usize {
        match self.kind {
            ModelKind::SeqLstm | ModelKind::Transformer => 1,
            ModelKind::CnnSeqLstm => self.conv_kernel + self.pool_window - 1,
            ModelKind::CnnLstm => self.conv2d_time + self.pool_window - 1,
            ModelKind::TextCnn => self.text_kernels.iter().copied().max().unwrap_or(1),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        let positive = [
            ("ws", self.ws),
            ("input_channels", self.input_channels),
            ("hidden_size", self.hidden_size),
            ("lstm_layers", self.lstm_layers),
            ("conv_channels", self.conv_channels),
            ("conv_kernel", self.conv_kernel),
            ("conv2d_time", self.conv2d_time),
            ("pool_window", self.pool_window),
            ("pool_stride", self.pool_stride),
            ("d_model", self.d_model),
            ("ff_width", self.ff_width),
            ("encoder_layers", self.encoder_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(&format!("{name} must be positive"));
        }
        if self.kind == ModelKind::TextCnn && (self.text_kernels.is_empty() || self.text_kernels.contains(&0)) {
            return bad("text_kernels must be a non-empty list of positive sizes");
        }
        if self.ws < self.min_ws() {
            return bad(&format!("{} needs ws >= {}, got {}", self.kind, self.min_ws(), self.ws));
        }
        Ok(())
    }
}

// ---- models ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    spec: ModelSpec,
    params: Vec<NamedTensor>,
}

/// Parameter leaves for one forward pass, in model order.
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn lstm(&self, prefix: &str) -> LstmParams {
        let g = |kind: &str, gate: &str| self.get(&format!("{prefix}.{kind}_{gate}"));
        LstmParams {
            weights: GATES.map(|gate| g("w", gate)),
            biases: GATES.map(|gate| g("b", gate)),
        }
    }
}

const GATES: [&str; 4] = ["f", "i", "o", "c"];

struct Init {
    rng: ChaCha8Rng,
    params: Vec<NamedTensor>,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let a = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-a..a)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("length matches shape");
        self.params.push(NamedTensor { name, value });
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.push(NamedTensor { name, value: Tensor::full(shape, v) });
    }

    fn dense(&mut self, prefix: &str, input: usize, output: usize) {
        self.uniform(format!("{prefix}.w"), &[input, output], input);
        self.uniform(format!("{prefix}.b"), &[output], input);
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) {
        for gate in GATES {
            self.uniform(format!("{prefix}.w_{gate}"), &[hidden + input, hidden], hidden + input);
        }
        for gate in GATES {
            let name = format!("{prefix}.b_{gate}");
            self.uniform(name, &[hidden], hidden + input);
            if gate == "f" {
                let b = self.params.last_mut().expect("just pushed");
                b.value = b.value.map(|v| v + 1.0);
            }
        }
    }

    fn lstm_stack(&mut self, spec: &ModelSpec, input: usize) {
        let mut width = input;
        for layer in 0..spec.lstm_layers {
            self.lstm(&format!("lstm{layer}"), width, spec.hidden_size);
            width = spec.hidden_size;
        }
    }
}

impl Model {
    /// Builds a model with seeded uniform fan-in initialization.
    pub fn build(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(spec.seed), params: Vec::new() };
        let c = spec.input_channels;
        let head_in = match spec.kind {
            ModelKind::SeqLstm => {
                init.lstm_stack(&spec, c);
                spec.hidden_size
            }
            ModelKind::CnnSeqLstm => {
                init.dense("conv", spec.conv_kernel * c, spec.conv_channels);
                init.lstm_stack(&spec, spec.conv_channels);
                spec.hidden_size
            }
            ModelKind::CnnLstm => {
                init.dense("conv", spec.conv2d_time * c, spec.conv_channels);
                init.lstm_stack(&spec, spec.conv_channels);
                spec.hidden_size
            }
            ModelKind::TextCnn => {
                for &k in &spec.text_kernels {
                    init.dense(&format!("text{k}"), k * c, spec.conv_channels);
                }
                spec.conv_channels * spec.text_kernels.len()
            }
            ModelKind::Transformer => {
                let d = spec.d_model;
                init.dense("proj", c, d);
                init.uniform("pos".into(), &[spec.ws, d], d);
                for layer in 0..spec.encoder_layers {
                    for w in ["wq", "wk", "wv"] {
                        init.uniform(format!("enc{layer}.{w}"), &[d, d], d);
                    }
                    for ln in ["ln1", "ln2"] {
                        init.constant(format!("enc{layer}.{ln}.gain"), &[d], 1.0);
                        init.constant(format!("enc{layer}.{ln}.bias"), &[d], 0.0);
                    }
                    init.dense(&format!("enc{layer}.ff1"), d, spec.ff_width);
                    init.dense(&format!("enc{layer}.ff2"), spec.ff_width, d);
                }
                d
            }
        };
        init.dense("head", head_in, 2);
        Ok(Self { spec, params: init.params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Bound { vars, index }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 3 || shape[1] != self.spec.ws || shape[2] != self.spec.input_channels || shape[0] == 0 {
            return Err(ModelError::InputShape {
                expected: self.spec.ws,
                channels: self.spec.input_channels,
                found: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass for `input: [b, ws, channels]` and returns
    /// logits `[b, 2]`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var, ModelError> {
        self.check_input(tape.value(input).shape())?;
        let spec = &self.spec;
        let b = tape.value(input).shape()[0];
        let features = match spec.kind {
            ModelKind::SeqLstm => lstm_stack_last(tape, bound, spec, input)?,
            ModelKind::CnnSeqLstm => {
                let conv = conv1d(tape, input, bound.get("conv.w"), bound.get("conv.b"))?;
                let conv = tape.relu(conv);
                let pooled = maxpool(tape, conv, spec.pool_window, spec.pool_stride)?;
                lstm_stack_last(tape, bound, spec, pooled)?
            }
            ModelKind::CnnLstm => {
                let (kh, kw) = (spec.conv2d_time, spec.input_channels);
                let maps = conv2d(tape, input, bound.get("conv.w"), bound.get("conv.b"), kh, kw)?;
                let maps = tape.relu(maps);
                let seq = tape.reshape(maps, &[b, spec.ws - kh + 1, spec.conv_channels])?;
                let pooled = maxpool(tape, seq, spec.pool_window, spec.pool_stride)?;
                lstm_stack_last(tape, bound, spec, pooled)?
            }
            ModelKind::TextCnn => {
                let mut branches = Vec::with_capacity(spec.text_kernels.len());
                for &k in &spec.text_kernels {
                    let conv = conv1d(tape, input, bound.get(&format!("text{k}.w")), bound.get(&format!("text{k}.b")))?;
                    let conv = tape.relu(conv);
                    let len = spec.ws - k + 1;
                    let pooled = maxpool(tape, conv, len, len)?;
                    branches.push(tape.reshape(pooled, &[b, spec.conv_channels])?);
                }
                tape.concat(&branches)?
            }
            ModelKind::Transformer => {
                let x = fully_connected(tape, input, bound.get("proj.w"), bound.get("proj.b"), Activation::Identity)?;
                let pos = positional_embedding(tape, bound.get("pos"), spec.ws)?;
                let mut x = tape.add(x, pos)?;
                for layer in 0..spec.encoder_layers {
                    x = encoder_block(tape, bound, &format!("enc{layer}"), x)?;
                }
                tape.mean_time(x)?
            }
        };
        Ok(fully_connected(tape, features, bound.get("head.w"), bound.get("head.b"), Activation::Identity)?)
    }

    /// Logits `[b, 2]` for a batch, without keeping the tape.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.leaf(batch.clone());
        let logits = self.forward_on(&mut tape, &bound, input)?;
        Ok(tape.value(logits).clone())
    }

    pub fn write_snapshot<W: Write>(&self, out: W) -> Result<(), ModelError> {
        let snap = Snapshot { version: SNAPSHOT_VERSION, spec: self.spec.clone(), params: self.params.clone() };
        serde_json::to_writer(out, &snap)?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(input: R) -> Result<Self, ModelError> {
        let snap: Snapshot = serde_json::from_reader(input)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(ModelError::SnapshotVersion { found: snap.version });
        }
        let reference = Model::build(snap.spec.clone())?;
        if reference.params.len() != snap.params.len() {
            return Err(ModelError::SnapshotMismatch(format!(
                "{} tensors, spec needs {}",
                snap.params.len(),
                reference.params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(&snap.params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(ModelError::SnapshotMismatch(format!(
                    "{} {:?} where {} {:?} was expected",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self { spec: snap.spec, params: snap.params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_snapshot(file)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        Self::read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn lstm_stack_last(tape: &mut Tape, bound: &Bound, spec: &ModelSpec, seq: Var) -> Result<Var, TensorError> {
    let mut x = seq;
    for layer in 0..spec.lstm_layers {
        x = lstm_layer(tape, x, &bound.lstm(&format!("lstm{layer}")))?;
    }
    let last = tape.value(x).shape()[1] - 1;
    tape.time_step(x, last)
}

fn encoder_block(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let g = |name: &str| bound.get(&format!("{prefix}.{name}"));
    let attended = self_attention(tape, x, g("wq"), g("wk"), g("wv"))?;
    let x = tape.add(x, attended)?;
    let x = layer_norm(tape, x, g("ln1.gain"), g("ln1.bias"))?;
    let hidden = fully_connected(tape, x, g("ff1.w"), g("ff1.b"), Activation::Relu)?;
    let ff = fully_connected(tape, hidden, g("ff2.w"), g("ff2.b"), Activation::Identity)?;
    let x = tape.add(x, ff)?;
    layer_norm(tape, x, g("ln2.gain"), g("ln2.bias"))
}
