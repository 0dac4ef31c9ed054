//! Finite-difference checks over every layer and a tiny instance of every
//! architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients, Activation, Tape, Var};
use crate::neural::{
    conv1d, conv2d, fully_connected, layer_norm, lstm_cell, lstm_layer, maxpool, positional_embedding,
    self_attention, LstmParams, Model, ModelError, ModelKind, ModelSpec,
};
use crate::tensor::Tensor;
use crate::TensorError;

/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Worst relative error over every input of the check.
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("length matches shape")
}

/// Checks `sum(build(inputs) * R)` for a fixed random `R` against every input.
fn check_inputs<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let proj = random_tensor(tape.value(out).shape(), seed.wrapping_add(0x9e37));
    let mut worst: f64 = 0.0;
    for target in 0..inputs.len() {
        let err = check_gradients(
            |t, v| {
                let vars: Vec<Var> =
                    inputs.iter().enumerate().map(|(j, x)| if j == target { v } else { t.leaf(x.clone()) }).collect();
                let out = build(t, &vars)?;
                let p = t.leaf(proj.clone());
                let weighted = t.mul(out, p)?;
                Ok(t.sum(weighted))
            },
            &inputs[target],
            GRAD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn lstm_inputs(input: usize, hidden: usize, seed: u64) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = (0..4).map(|g| random_tensor(&[hidden + input, hidden], seed + g)).collect();
    out.extend((0..4).map(|g| random_tensor(&[hidden], seed + 10 + g)));
    out
}

fn lstm_params(v: &[Var]) -> LstmParams {
    LstmParams { weights: [v[0], v[1], v[2], v[3]], biases: [v[4], v[5], v[6], v[7]] }
}

fn to_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(e) => e,
        other => TensorError::Shape { op: "model", detail: other.to_string() },
    }
}

fn tiny_spec(kind: ModelKind, seed: u64) -> ModelSpec {
    ModelSpec {
        hidden_size: 3,
        conv_channels: 2,
        d_model: 4,
        ff_width: 5,
        encoder_layers: 2,
        ..ModelSpec::new(kind, 6, seed)
    }
}

/// Cross-entropy of a tiny model checked against every parameter tensor.
pub fn model_gradient_error(spec: ModelSpec, seed: u64) -> Result<f64, ModelError> {
    let model = Model::build(spec.clone())?;
    let input = random_tensor(&[2, spec.ws, spec.input_channels], seed);
    let labels = [0, 1];
    let mut worst: f64 = 0.0;
    for target in 0..model.params().len() {
        let err = check_gradients(
            |t, v| {
                let mut bound = model.bind(t);
                bound.vars[target] = v;
                let x = t.leaf(input.clone());
                let logits = model.forward_on(t, &bound, x).map_err(to_tensor_error)?;
                t.cross_entropy(logits, &labels)
            },
            &model.params()[target].value,
            GRAD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Seeded random instances of every layer, then every architecture end to end.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>, ModelError> {
    let mut checks = Vec::new();
    let mut push = |name: &str, err: f64| checks.push(GradCheck { name: name.to_string(), max_rel_error: err });
    let s = seed;

    let mut cell = vec![random_tensor(&[2, 3], s), random_tensor(&[2, 4], s + 1), random_tensor(&[2, 4], s + 2)];
    cell.extend(lstm_inputs(3, 4, s + 3));
    push(
        "lstm_cell",
        check_inputs(&cell, s, |t, v| {
            let (h, c) = lstm_cell(t, v[0], v[1], v[2], &lstm_params(&v[3..]))?;
            t.concat(&[h, c])
        })?,
    );

    let mut layer = vec![random_tensor(&[2, 5, 3], s + 20)];
    layer.extend(lstm_inputs(3, 4, s + 21));
    push("lstm_layer", check_inputs(&layer, s, |t, v| lstm_layer(t, v[0], &lstm_params(&v[1..])))?);

    let conv = [random_tensor(&[2, 7, 3], s + 40), random_tensor(&[9, 4], s + 41), random_tensor(&[4], s + 42)];
    push("conv1d", check_inputs(&conv, s, |t, v| conv1d(t, v[0], v[1], v[2]))?);

    let conv = [random_tensor(&[2, 6, 5], s + 50), random_tensor(&[15, 3], s + 51), random_tensor(&[3], s + 52)];
    push("conv2d", check_inputs(&conv, s, |t, v| conv2d(t, v[0], v[1], v[2], 3, 5))?);

    push("maxpool", check_inputs(&[random_tensor(&[2, 9, 3], s + 60)], s, |t, v| maxpool(t, v[0], 2, 2))?);

    let attn = [
        random_tensor(&[2, 5, 4], s + 70),
        random_tensor(&[4, 4], s + 71),
        random_tensor(&[4, 4], s + 72),
        random_tensor(&[4, 4], s + 73),
    ];
    push("attention", check_inputs(&attn, s, |t, v| self_attention(t, v[0], v[1], v[2], v[3]))?);

    let ln = [random_tensor(&[2, 3, 6], s + 80), random_tensor(&[6], s + 81), random_tensor(&[6], s + 82)];
    push("layer_norm", check_inputs(&ln, s, |t, v| layer_norm(t, v[0], v[1], v[2]))?);

    push(
        "embedding",
        check_inputs(&[random_tensor(&[7, 3], s + 90)], s, |t, v| positional_embedding(t, v[0], 5))?,
    );

    for (name, act) in [
        ("fully_connected", Activation::Identity),
        ("fully_connected_sigmoid", Activation::Sigmoid),
        ("fully_connected_tanh", Activation::Tanh),
        ("fully_connected_relu", Activation::Relu),
    ] {
        let fc = [random_tensor(&[3, 4], s + 100), random_tensor(&[4, 5], s + 101), random_tensor(&[5], s + 102)];
        push(name, check_inputs(&fc, s, |t, v| fully_connected(t, v[0], v[1], v[2], act))?);
    }

    let labels = [1, 0, 1, 1];
    push(
        "cross_entropy",
        check_inputs(&[random_tensor(&[4, 2], s + 110).map(|v| 3.0 * v)], s, |t, v| t.cross_entropy(v[0], &labels))?,
    );

    for kind in ModelKind::ALL {
        let err = model_gradient_error(tiny_spec(kind, s + 120), s + 121)?;
        push(&format!("model_{}", kind.as_str()), err);
    }
    Ok(checks)
}
