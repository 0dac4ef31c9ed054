//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its value and enough cached state
//! to run its backward rule. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a
//! node can only reference earlier nodes. Reductions always run in index
//! order, so identical inputs give bit-identical values and gradients.
//!
//! Shape conventions: "rows" are all leading axes flattened, the last axis
//! is the feature axis. Sequence tensors are `[batch, time, channels]`.

use crate::tensor::{gemm, gemm_strided, Layout, Tensor};
use crate::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Unary { a: Var, kind: Unary },
    Softmax { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Stack { parts: Vec<Var> },
    TimeStep { a: Var, t: usize },
    Unfold1d { a: Var, k: usize },
    Unfold2d { a: Var, kh: usize, kw: usize },
    MaxPool { a: Var, argmax: Vec<usize> },
    MeanTime { a: Var },
    Sum { a: Var },
    Embedding { table: Var, positions: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LstmCell { x: Var, state: Var, weights: [Var; 4], biases: [Var; 4], gates: Vec<f64>, tanh_c: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf it depends on.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn rows_of(t: &Tensor) -> usize {
    t.len() / t.last_dim().max(1)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Leaf) || value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters enter the tape as leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a · b` with `a: [.., k]` (leading axes flattened) and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (rows_of(av), bv.shape()[0], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == if trans_b { sb[2] } else { sb[1] };
        if !ok {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }))
    }

    /// Elementwise sum; `b` may also be a trailing-axes suffix of `a`,
    /// broadcast over the leading axes (biases, positional tables).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.shape().ends_with(bv.shape()) || bv.is_empty() {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let bd = bv.data();
        let data = av.data().chunks_exact(bd.len()).flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale { a, factor })
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = match kind {
            Unary::Sigmoid => self.value(a).map(sigmoid),
            Unary::Tanh => self.value(a).map(f64::tanh),
            Unary::Relu => self.value(a).map(|x| x.max(0.0)),
        };
        self.push(out, Op::Unary { a, kind })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn activate(&mut self, a: Var, activation: Activation) -> Var {
        match activation {
            Activation::Identity => a,
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// Softmax over the last axis, computed after subtracting each row's max.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(av.shape().to_vec(), out).expect("shape preserved");
        self.push(out, Op::Softmax { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len().saturating_sub(1)];
        if parts.iter().any(|&p| {
            let s = self.shape(p);
            s.is_empty() || &s[..s.len() - 1] != lead
        }) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
            return Err(shape_err("concat", format!("{shapes:?}")));
        }
        let rows = rows_of(self.value(*first));
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec() }))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let d = av.last_dim();
        if av.shape().is_empty() || start + len > d || len == 0 {
            return Err(shape_err("slice_last", format!("{start}..{} of {:?}", start + len, av.shape())));
        }
        let out: Vec<f64> = av.data().chunks_exact(d).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, start }))
    }

    /// Stacks `L` tensors of shape `[b, c]` into `[b, L, c]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("stack_time", "no inputs".into()))?;
        let s = self.shape(*first).to_vec();
        if s.len() != 2 || parts.iter().any(|&p| self.shape(p) != s.as_slice()) {
            return Err(shape_err("stack_time", format!("parts must share a [b, c] shape, first is {s:?}")));
        }
        let (b, c, l) = (s[0], s[1], parts.len());
        let mut out = vec![0.0; b * l * c];
        for (t, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for bi in 0..b {
                out[(bi * l + t) * c..(bi * l + t + 1) * c].copy_from_slice(&src[bi * c..(bi + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![b, l, c], out)?, Op::Stack { parts: parts.to_vec() }))
    }

    /// Step `t` of a `[b, L, c]` sequence, as `[b, c]`.
    pub fn time_step(&mut self, a: Var, t: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(shape_err("time_step", format!("step {t} of {s:?}")));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            out.extend_from_slice(&src[(bi * l + t) * c..(bi * l + t + 1) * c]);
        }
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::TimeStep { a, t }))
    }

    /// Sliding windows of `k` steps over `[b, L, c]`, flattened to
    /// `[b, L - k + 1, k * c]` (step-major within each window).
    pub fn unfold1d(&mut self, a: Var, k: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || k == 0 || k > s[1] {
            return Err(shape_err("unfold1d", format!("kernel {k} over {s:?}")));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let lo = l - k + 1;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * lo * k * c);
        for bi in 0..b {
            for t in 0..lo {
                out.extend_from_slice(&src[(bi * l + t) * c..(bi * l + t + k) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![b, lo, k * c], out)?, Op::Unfold1d { a, k }))
    }

    /// `kh x kw` patches of `[b, H, W]`, as `[b, H - kh + 1, W - kw + 1, kh * kw]`.
    pub fn unfold2d(&mut self, a: Var, kh: usize, kw: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || kh == 0 || kw == 0 || kh > s[1] || kw > s[2] {
            return Err(shape_err("unfold2d", format!("kernel {kh}x{kw} over {s:?}")));
        }
        let (b, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * ho * wo * kh * kw);
        for bi in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    for u in 0..kh {
                        let row = (bi * h + i + u) * w + j;
                        out.extend_from_slice(&src[row..row + kw]);
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, ho, wo, kh * kw], out)?, Op::Unfold2d { a, kh, kw }))
    }

    /// Max over time windows of `[b, L, c]`; ties resolve to the earliest step.
    pub fn maxpool_time(&mut self, a: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || window == 0 || stride == 0 || window > s[1] {
            return Err(shape_err("maxpool", format!("window {window} stride {stride} over {s:?}")));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let lo = (l - window) / stride + 1;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * lo * c);
        let mut argmax = Vec::with_capacity(b * lo * c);
        for bi in 0..b {
            for o in 0..lo {
                for ch in 0..c {
                    let mut best = (bi * l + o * stride) * c + ch;
                    for t in 1..window {
                        let idx = (bi * l + o * stride + t) * c + ch;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, lo, c], out)?, Op::MaxPool { a, argmax }))
    }

    /// Mean over the time axis of `[b, L, c]`.
    pub fn mean_time(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(shape_err("mean_time", format!("{s:?}")));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for t in 0..l {
                for ch in 0..c {
                    out[bi * c + ch] += src[(bi * l + t) * c + ch];
                }
            }
        }
        for v in &mut out {
            *v /= l as f64;
        }
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::MeanTime { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    /// Rows `positions` of a `[P, d]` table.
    pub fn embedding(&mut self, table: Var, positions: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err("embedding", format!("table shape {:?}", tv.shape())));
        }
        let (p, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = positions.iter().find(|&&i| i >= p) {
            return Err(TensorError::Index { index: bad, len: p });
        }
        let mut out = Vec::with_capacity(positions.len() * d);
        for &i in positions {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![positions.len(), d], out)?;
        Ok(self.push(out, Op::Embedding { table, positions: positions.to_vec() }))
    }

    /// Standardizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", xv.shape(), self.shape(gain), self.shape(bias)),
            ));
        }
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let rows = rows_of(xv);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + bb[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// One LSTM step. `state` is `[b, 2h]` holding `[h_prev | c_prev]`; the
    /// result has the same layout. Weights are `[(h + in), h]` acting on the
    /// concatenation `[h_prev, x]`, biases `[h]`, in gate order forget,
    /// input, output, candidate.
    pub fn lstm_cell(&mut self, x: Var, state: Var, weights: [Var; 4], biases: [Var; 4]) -> Result<Var, TensorError> {
        let (xs, ss) = (self.shape(x).to_vec(), self.shape(state).to_vec());
        if xs.len() != 2 || ss.len() != 2 || xs[0] != ss[0] || ss[1] % 2 != 0 {
            return Err(shape_err("lstm_cell", format!("input {xs:?}, state {ss:?}")));
        }
        let (b, input, h) = (xs[0], xs[1], ss[1] / 2);
        for (&w, &bias) in weights.iter().zip(&biases) {
            if self.shape(w) != [h + input, h] || self.shape(bias) != [h] {
                return Err(shape_err(
                    "lstm_cell",
                    format!("weight {:?} / bias {:?} for hidden {h}, input {input}", self.shape(w), self.shape(bias)),
                ));
            }
        }
        let xv = self.value(x).data();
        let sv = self.value(state).data();
        let mut gates = vec![0.0; 4 * b * h];
        for (gate, (&w, &bias)) in weights.iter().zip(&biases).enumerate() {
            let pre = &mut gates[gate * b * h..(gate + 1) * b * h];
            let wv = self.nodes[w.0].value.data();
            let bv = self.nodes[bias.0].value.data();
            for row in pre.chunks_exact_mut(h) {
                row.copy_from_slice(bv);
            }
            gemm_strided(b, h, h, sv, Layout::rows(2 * h), &wv[..h * h], Layout::rows(h), 1.0, pre, Layout::rows(h));
            gemm_strided(b, input, h, xv, Layout::rows(input), &wv[h * h..], Layout::rows(h), 1.0, pre, Layout::rows(h));
            let squash: fn(f64) -> f64 = if gate == 3 { f64::tanh } else { sigmoid };
            for v in pre.iter_mut() {
                *v = squash(*v);
            }
        }
        let mut out = vec![0.0; b * 2 * h];
        let mut tanh_c = vec![0.0; b * h];
        let (f, rest) = gates.split_at(b * h);
        let (i, rest) = rest.split_at(b * h);
        let (o, g) = rest.split_at(b * h);
        for bi in 0..b {
            for j in 0..h {
                let k = bi * h + j;
                let c = f[k] * sv[bi * 2 * h + h + j] + i[k] * g[k];
                let tc = c.tanh();
                tanh_c[k] = tc;
                out[bi * 2 * h + j] = o[k] * tc;
                out[bi * 2 * h + h + j] = c;
            }
        }
        let out = Tensor::new(vec![b, 2 * h], out)?;
        Ok(self.push(out, Op::LstmCell { x, state, weights, biases, gates, tanh_c }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(shape_err("cross_entropy", format!("logits {:?}, {} labels", lv.shape(), labels.len())));
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Index { index: bad, len: classes });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let loss = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(loss, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut [f64] {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape())).data_mut()
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (rows_of(av), bv.shape()[0], bv.shape()[1]);
                gemm(m, n, k, gd, false, bv.data(), true, 1.0, self.buf(grads, *a));
                gemm(k, m, n, av.data(), true, gd, false, 1.0, self.buf(grads, *b));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let da = &mut self.buf(grads, *a)[i * m * k..(i + 1) * m * k];
                    // out = a b  => da = g b^T ;  out = a b^T => da = g b
                    gemm(m, n, k, gi, false, bi, !trans_b, 1.0, da);
                    let db = &mut self.buf(grads, *b)[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gi, true, ai, false, 1.0, db);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, 1.0, db);
                    }
                }
            }
            Op::Add { a, b } => {
                for (d, x) in self.buf(grads, *a).iter_mut().zip(gd) {
                    *d += x;
                }
                let db = self.buf(grads, *b);
                let w = db.len();
                for chunk in gd.chunks_exact(w) {
                    for (d, x) in db.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for ((d, x), y) in self.buf(grads, *a).iter_mut().zip(gd).zip(bv) {
                    *d += x * y;
                }
                for ((d, x), y) in self.buf(grads, *b).iter_mut().zip(gd).zip(av) {
                    *d += x * y;
                }
            }
            Op::Scale { a, factor } => {
                for (d, x) in self.buf(grads, *a).iter_mut().zip(gd) {
                    *d += x * factor;
                }
            }
            Op::Unary { a, kind } => {
                let y = node.value.data();
                let da = self.buf(grads, *a);
                for ((d, &x), &yv) in da.iter_mut().zip(gd).zip(y) {
                    *d += x * match kind {
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Relu => {
                            if yv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let da = self.buf(grads, *a);
                for ((drow, grow), yrow) in da.chunks_exact_mut(d).zip(gd.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
            Op::Reshape { a } => {
                for (d, x) in self.buf(grads, *a).iter_mut().zip(gd) {
                    *d += x;
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = rows_of(&node.value);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let dp = self.buf(grads, p);
                    for r in 0..rows {
                        for j in 0..w {
                            dp[r * w + j] += gd[r * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let d = self.value(*a).last_dim();
                let len = node.value.last_dim();
                let da = self.buf(grads, *a);
                for (drow, grow) in da.chunks_exact_mut(d).zip(gd.chunks_exact(len)) {
                    for (dv, gv) in drow[*start..start + len].iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
            Op::Stack { parts } => {
                let s = node.value.shape();
                let (b, l, c) = (s[0], s[1], s[2]);
                for (t, &p) in parts.iter().enumerate() {
                    let dp = self.buf(grads, p);
                    for bi in 0..b {
                        for ch in 0..c {
                            dp[bi * c + ch] += gd[(bi * l + t) * c + ch];
                        }
                    }
                }
            }
            Op::TimeStep { a, t } => {
                let s = self.shape(*a);
                let (b, l, c) = (s[0], s[1], s[2]);
                let da = self.buf(grads, *a);
                for bi in 0..b {
                    for ch in 0..c {
                        da[(bi * l + t) * c + ch] += gd[bi * c + ch];
                    }
                }
            }
            Op::Unfold1d { a, k } => {
                let s = self.shape(*a);
                let (b, l, c) = (s[0], s[1], s[2]);
                let lo = l - k + 1;
                let block = k * c;
                let da = self.buf(grads, *a);
                for bi in 0..b {
                    for t in 0..lo {
                        let src = &gd[(bi * lo + t) * block..(bi * lo + t + 1) * block];
                        let dst = &mut da[(bi * l + t) * c..(bi * l + t + k) * c];
                        for (dv, gv) in dst.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Unfold2d { a, kh, kw } => {
                let s = self.shape(*a);
                let (b, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h - kh + 1, w - kw + 1);
                let da = self.buf(grads, *a);
                let mut idx = 0;
                for bi in 0..b {
                    for i in 0..ho {
                        for j in 0..wo {
                            for u in 0..*kh {
                                let row = (bi * h + i + u) * w + j;
                                for v in 0..*kw {
                                    da[row + v] += gd[idx];
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { a, argmax } => {
                let da = self.buf(grads, *a);
                for (&src, gv) in argmax.iter().zip(gd) {
                    da[src] += gv;
                }
            }
            Op::MeanTime { a } => {
                let s = self.shape(*a);
                let (b, l, c) = (s[0], s[1], s[2]);
                let da = self.buf(grads, *a);
                for bi in 0..b {
                    for t in 0..l {
                        for ch in 0..c {
                            da[(bi * l + t) * c + ch] += gd[bi * c + ch] / l as f64;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let g0 = gd[0];
                for d in self.buf(grads, *a).iter_mut() {
                    *d += g0;
                }
            }
            Op::Embedding { table, positions } => {
                let d = self.value(*table).last_dim();
                let dt = self.buf(grads, *table);
                for (r, &p) in positions.iter().enumerate() {
                    for j in 0..d {
                        dt[p * d + j] += gd[r * d + j];
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*x).last_dim();
                let gv = self.value(*gain).data();
                {
                    let dg = self.buf(grads, *gain);
                    for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                {
                    let db = self.buf(grads, *bias);
                    for grow in gd.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                }
                let dx = self.buf(grads, *x);
                let mut dxhat = vec![0.0; d];
                for (r, (grow, hrow)) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
            Op::LstmCell { x, state, weights, biases, gates, tanh_c } => {
                self.lstm_backward(gd, *x, *state, weights, biases, gates, tanh_c, grads);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.value(*logits).last_dim();
                let scale = gd[0] / labels.len() as f64;
                let dl = self.buf(grads, *logits);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dl[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        gd: &[f64],
        x: Var,
        state: Var,
        weights: &[Var; 4],
        biases: &[Var; 4],
        gates: &[f64],
        tanh_c: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (b, input) = (self.shape(x)[0], self.shape(x)[1]);
        let h = self.shape(state)[1] / 2;
        let sv = self.value(state).data();
        let xv = self.value(x).data();
        let (f, rest) = gates.split_at(b * h);
        let (i, rest) = rest.split_at(b * h);
        let (o, g) = rest.split_at(b * h);
        // pre-activation gradients, gate-major like `gates`
        let mut dpre = vec![0.0; 4 * b * h];
        let mut dc_prev = vec![0.0; b * h];
        for bi in 0..b {
            for j in 0..h {
                let k = bi * h + j;
                let dh = gd[bi * 2 * h + j];
                let dc = gd[bi * 2 * h + h + j] + dh * o[k] * (1.0 - tanh_c[k] * tanh_c[k]);
                let c_prev = sv[bi * 2 * h + h + j];
                dpre[k] = dc * c_prev * f[k] * (1.0 - f[k]);
                dpre[b * h + k] = dc * g[k] * i[k] * (1.0 - i[k]);
                dpre[2 * b * h + k] = dh * tanh_c[k] * o[k] * (1.0 - o[k]);
                dpre[3 * b * h + k] = dc * i[k] * (1.0 - g[k] * g[k]);
                dc_prev[k] = dc * f[k];
            }
        }
        for gate in 0..4 {
            let dp = &dpre[gate * b * h..(gate + 1) * b * h];
            {
                let dw = self.buf(grads, weights[gate]);
                let (dw_h, dw_x) = dw.split_at_mut(h * h);
                // dW[:h] += h_prev^T dp ; dW[h:] += x^T dp
                gemm_strided(h, b, h, sv, Layout { row_stride: 1, col_stride: 2 * h }, dp, Layout::rows(h), 1.0, dw_h, Layout::rows(h));
                gemm_strided(input, b, h, xv, Layout::transposed(input), dp, Layout::rows(h), 1.0, dw_x, Layout::rows(h));
            }
            {
                let db = self.buf(grads, biases[gate]);
                for row in dp.chunks_exact(h) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            let wv = self.value(weights[gate]).data();
            {
                let ds = self.buf(grads, state);
                // dh_prev += dp W[:h]^T, written into the first half of each state row
                gemm_strided(b, h, h, dp, Layout::rows(h), &wv[..h * h], Layout::transposed(h), 1.0, ds, Layout::rows(2 * h));
            }
            let dxb = self.buf(grads, x);
            gemm_strided(b, h, input, dp, Layout::rows(h), &wv[h * h..], Layout::transposed(h), 1.0, dxb, Layout::rows(input));
        }
        let ds = self.buf(grads, state);
        for bi in 0..b {
            for j in 0..h {
                ds[bi * 2 * h + h + j] += dc_prev[bi * h + j];
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Below this magnitude gradients are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Largest per-coordinate `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the leaf for `x` and must return a
/// single-element node.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&mut tape, leaf)?;
    let analytic = tape.backward(loss)?.get_or_zeros(leaf, x);
    let eval = |probe: &Tensor| {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe.clone());
        let out = f(&mut tape, leaf).expect("shapes fixed by the first evaluation");
        tape.value(out).item()
    };
    let numeric = numeric_gradient(eval, x, eps);
    Ok(max_relative_error(&analytic, &numeric))
}
