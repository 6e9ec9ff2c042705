//! Feed-forward classifier trained from scratch.
//!
//! Hidden layers use ReLU, the 2-unit output layer uses softmax, and training
//! minimizes mean cross-entropy with Adam. Weight matrices are stored
//! row-major with one row per output unit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::heartdata::{Features, NUM_FEATURES};

/// Layer widths of the diagnosis network: 13 inputs, three hidden layers, 2 outputs.
pub const LAYER_DIMS: [usize; 5] = [NUM_FEATURES, 20, 20, 10, 2];

pub const MODEL_MAGIC: &str = "healthfog-mlp v1";

/// A normalized feature vector with its class label (0 or 1).
pub type Sample = (Features, usize);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("input has {got} features, model expects {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("input contains a non-finite value at index {0}")]
    NonFiniteInput(usize),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
    #[error("loss became NaN in epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("label {0} is not a valid class")]
    BadLabel(usize),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelFormatError {
    #[error("unexpected end of model file")]
    UnexpectedEof,
    #[error("unsupported model file header {0:?}, expected \"healthfog-mlp v1\"")]
    BadHeader(String),
    #[error("model dims {found:?} do not match expected {expected:?}")]
    WrongDims {
        found: Vec<usize>,
        expected: [usize; 5],
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.biases[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
}

/// Glorot-uniform weights, zero biases, using the standard layer widths.
pub fn init_model(seed: u64) -> MlpModel {
    MlpModel::with_dims(&LAYER_DIMS, seed)
}

impl MlpModel {
    pub fn with_dims(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let mut layer = Layer::zeros(fan_in, fan_out);
                for v in &mut layer.weights {
                    *v = rng.gen_range(-limit..=limit);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    /// A model whose parameters are all zero; it outputs (0.5, 0.5) for any input.
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.inputs).collect();
        if let Some(last) = self.layers.last() {
            d.push(last.outputs);
        }
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters in file order: per layer, weights row-major then biases.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                return &mut l.biases[idx];
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.weights.len() {
                return l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                return l.biases[idx];
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    /// Forward pass keeping every layer's activations (input first, softmax last).
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(acts.last().unwrap(), &mut z);
            if i == last {
                softmax_in_place(&mut z);
            } else {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        acts
    }

    fn probs_unchecked(&self, x: &[f64]) -> (f64, f64) {
        let out = self.forward_all(x).pop().unwrap();
        (out[0], out[1])
    }

    /// Class probabilities (p0 = no disease, p1 = disease).
    pub fn predict_proba(&self, x: &[f64]) -> Result<(f64, f64), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::InputSize {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput(i));
        }
        Ok(self.probs_unchecked(x))
    }

    /// Argmax class, ties going to class 1.
    pub fn predict(&self, x: &[f64]) -> Result<usize, NnError> {
        self.predict_proba(x).map(|(p0, p1)| argmax_pair(p0, p1))
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, batch: &[Sample]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|(x, y)| {
                let p = self.forward_all(x).pop().unwrap()[*y];
                // NaN must propagate, so no f64::max here
                -libm::log(if p < 1e-300 { 1e-300 } else { p })
            })
            .sum();
        total / batch.len() as f64
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples
            .iter()
            .filter(|(x, y)| {
                let (p0, p1) = self.probs_unchecked(x);
                argmax_pair(p0, p1) == *y
            })
            .count();
        correct as f64 / samples.len() as f64
    }

    /// Analytic gradient of the mean cross-entropy over `batch`.
    pub fn gradients(&self, batch: &[Sample]) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let scale = 1.0 / batch.len() as f64;
        for (x, y) in batch {
            let acts = self.forward_all(x);
            // softmax + cross-entropy: dL/dz = p - onehot
            let mut delta: Vec<f64> = acts.last().unwrap().clone();
            delta[*y] -= 1.0;
            for (li, layer) in self.layers.iter().enumerate().rev() {
                let input = &acts[li];
                let g = &mut grads.layers[li];
                for o in 0..layer.outputs {
                    let d = delta[o] * scale;
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, xi) in row.iter_mut().zip(input) {
                        *gw += d * xi;
                    }
                }
                if li == 0 {
                    break;
                }
                let mut prev = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += delta[o] * w;
                    }
                }
                // ReLU derivative, taken as 0 at exactly 0
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        grads
    }
}

/// Gradient buffers with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }
}

pub fn argmax_pair(p0: f64, p1: f64) -> usize {
    if p1 >= p0 {
        1
    } else {
        0
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0001,
            epochs: 300,
            batch_size: 16,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(NnError::BadConfig("learning_rate must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(NnError::BadConfig("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(NnError::BadConfig("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(NnError::BadConfig("adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(NnError::BadConfig("adam_eps must be > 0"));
        }
        Ok(())
    }
}

/// Per-epoch training curves. Validation entries are NaN when no validation set is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.adam_beta1, f64::from(self.t));
        let bc2 = 1.0 - libm::pow(cfg.adam_beta2, f64::from(self.t));
        let mut k = 0;
        for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
            let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
            let gs = g.weights.iter().chain(g.biases.iter());
            for (p, &gi) in params.zip(gs) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * gi;
                *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
                k += 1;
            }
        }
    }
}

/// Mini-batch Adam on cross-entropy. The shuffle order of every epoch is
/// derived from `cfg.seed`, so identical inputs give identical parameters.
pub fn train(
    model: &MlpModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory), NnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptyTrainSet);
    }
    let classes = model.layers.last().map_or(0, |l| l.outputs);
    if let Some((_, y)) = train_set.iter().chain(val_set).find(|(_, y)| *y >= classes) {
        return Err(NnError::BadLabel(*y));
    }
    let mut model = model.clone();
    let mut adam = Adam::new(model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i]));
            let grads = model.gradients(&batch);
            adam.step(&mut model, &grads, cfg);
        }
        let loss = model.loss(train_set);
        if loss.is_nan() {
            return Err(NnError::NanLoss { epoch });
        }
        history.train_loss.push(loss);
        history.train_accuracy.push(model.accuracy(train_set));
        if val_set.is_empty() {
            history.val_loss.push(f64::NAN);
            history.val_accuracy.push(f64::NAN);
        } else {
            history.val_loss.push(model.loss(val_set));
            history.val_accuracy.push(model.accuracy(val_set));
        }
    }
    Ok((model, history))
}

/// Central-difference step used by [`gradient_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the analytic gradient with central finite differences on
/// `n_params` randomly chosen parameters (all of them if fewer exist) and
/// returns the largest relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(model: &MlpModel, batch: &[Sample], n_params: usize, seed: u64) -> f64 {
    gradient_check_with(model, batch, n_params, seed, |m, b| m.gradients(b).flat())
}

/// [`gradient_check`] with a caller-supplied analytic gradient.
pub fn gradient_check_with<F>(
    model: &MlpModel,
    batch: &[Sample],
    n_params: usize,
    seed: u64,
    analytic: F,
) -> f64
where
    F: Fn(&MlpModel, &[Sample]) -> Vec<f64>,
{
    let grad = analytic(model, batch);
    let total = model.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if n_params >= total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, n_params).into_vec()
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for idx in indices {
        let orig = model.param(idx);
        *probe.param_mut(idx) = orig + GRAD_CHECK_STEP;
        let up = probe.loss(batch);
        *probe.param_mut(idx) = orig - GRAD_CHECK_STEP;
        let down = probe.loss(batch);
        *probe.param_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = grad[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Serializes a model to the versioned text format:
///
/// ```text
/// healthfog-mlp v1
/// dims 13 20 20 10 2
/// activation relu softmax
/// <one parameter per line: per layer, weights row-major then biases>
/// end
/// ```
pub fn model_to_text(model: &MlpModel) -> String {
    let mut out = String::new();
    out.push_str(MODEL_MAGIC);
    out.push_str("\ndims");
    for d in model.dims() {
        let _ = write!(out, " {d}");
    }
    out.push_str("\nactivation relu softmax\n");
    for p in model.params() {
        // Debug formatting of f64 is the shortest string that round-trips
        let _ = writeln!(out, "{p:?}");
    }
    out.push_str("end\n");
    out
}

pub fn model_from_text(text: &str) -> Result<MlpModel, ModelFormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = || lines.next().ok_or(ModelFormatError::UnexpectedEof);

    let (_, header) = next()?;
    if header != MODEL_MAGIC {
        return Err(ModelFormatError::BadHeader(header.into()));
    }
    let (ln, dims_line) = next()?;
    let dims: Vec<usize> = match dims_line.strip_prefix("dims") {
        Some(rest) => rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelFormatError::Malformed {
                line: ln,
                msg: format!("bad dims line {dims_line:?}"),
            })?,
        None => {
            return Err(ModelFormatError::Malformed {
                line: ln,
                msg: "expected dims line".into(),
            })
        }
    };
    if dims != LAYER_DIMS {
        return Err(ModelFormatError::WrongDims {
            found: dims,
            expected: LAYER_DIMS,
        });
    }
    let (ln, act) = next()?;
    if act != "activation relu softmax" {
        return Err(ModelFormatError::Malformed {
            line: ln,
            msg: format!("unsupported activation line {act:?}"),
        });
    }
    let mut model = MlpModel::zeros(&dims);
    for layer in &mut model.layers {
        for slot in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            let (ln, tok) = next()?;
            if tok == "end" {
                return Err(ModelFormatError::UnexpectedEof);
            }
            *slot = match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    return Err(ModelFormatError::Malformed {
                        line: ln,
                        msg: format!("bad parameter {tok:?}"),
                    })
                }
            };
        }
    }
    let (ln, trailer) = next()?;
    if trailer != "end" {
        return Err(ModelFormatError::Malformed {
            line: ln,
            msg: "expected end marker after parameters".into(),
        });
    }
    Ok(model)
}
