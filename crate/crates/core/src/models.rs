//! Softmax classifiers with hand-written backpropagation.
//!
//! One type covers logistic regression (no hidden layers) and tanh MLPs. It
//! serves as the black-box expert, the frozen baseline and the two-output
//! gate.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("input has length {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("gradient has length {found}, model has {expected} parameters")]
    GradientDimension { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient; training diverged (try a smaller learning rate)")]
    Divergence,
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Lr,
    Mlp { hidden: Vec<usize> },
}

impl Architecture {
    pub fn mlp(hidden: &[usize]) -> Self {
        Architecture::Mlp {
            hidden: hidden.to_vec(),
        }
    }

    fn hidden(&self) -> &[usize] {
        match self {
            Architecture::Lr => &[],
            Architecture::Mlp { hidden } => hidden,
        }
    }
}

/// Dense layer, weights stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }
}

/// Flat parameter-space vector (gradients and update directions).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Gradient(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        self.axpy(1.0, other);
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Gradient) {
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.0 {
            *s *= a;
        }
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[k]` the output of hidden
    /// layer `k` after tanh.
    activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffClassifier {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
}

impl DiffClassifier {
    /// All-zero parameters.
    pub fn zeros(architecture: Architecture, input_dim: usize, output_dim: usize) -> Result<Self, ModelError> {
        if input_dim == 0 || output_dim < 2 {
            return Err(ModelError::Architecture(format!(
                "need input_dim >= 1 and output_dim >= 2, got {input_dim} and {output_dim}"
            )));
        }
        if architecture.hidden().contains(&0) {
            return Err(ModelError::Architecture("hidden layer of width 0".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(architecture.hidden());
        widths.push(output_dim);
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self {
            architecture,
            input_dim,
            output_dim,
            layers,
        })
    }

    /// Uniform(-r, r) initialization with r = 1/sqrt(fan_in) per layer.
    pub fn new<R: Rng + ?Sized>(
        architecture: Architecture,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut model = Self::zeros(architecture, input_dim, output_dim)?;
        for layer in &mut model.layers {
            let r = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.gen_range(-r..r);
            }
        }
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// Flattened parameters: per layer, weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), ModelError> {
        if params.len() != self.n_params() {
            return Err(ModelError::GradientDimension {
                expected: self.n_params(),
                found: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::Dimension {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        Ok(self.probs(x))
    }

    /// Forward pass without the dimension check.
    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if k < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        softmax(&cur)
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        argmax(&self.probs(x))
    }

    pub fn forward_trace(&self, x: &[f64]) -> ForwardTrace {
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        let mut logits = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(&activations[k], &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
                activations.push(out);
            } else {
                logits = out;
            }
        }
        ForwardTrace {
            probs: softmax(&logits),
            activations,
        }
    }

    /// Backpropagates `dlogits` (dL/dz at the softmax input) through the
    /// network, adding `scale * dL/dparams` into `grad`.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], scale: f64, grad: &mut [f64]) {
        let offsets = self.layer_offsets();
        let mut delta = dlogits.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &trace.activations[k];
            let base = offsets[k];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += scale * d * a;
                }
            }
            let bias_base = base + layer.weights.len();
            for (o, &d) in delta.iter().enumerate() {
                grad[bias_base + o] += scale * d;
            }
            if k > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.n_params();
        }
        offsets
    }

    /// `params <- params - lr * grad`
    pub fn sgd_step(&mut self, grad: &Gradient, lr: f64) -> Result<(), ModelError> {
        if grad.len() != self.n_params() {
            return Err(ModelError::GradientDimension {
                expected: self.n_params(),
                found: grad.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *p -= lr * grad.0[offset];
                offset += 1;
            }
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Pulls dL/dprobs back through the softmax to dL/dlogits.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs.iter().zip(dprobs).map(|(p, d)| p * (d - inner)).collect()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn ce_loss(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(PROB_FLOOR).ln()
}

/// dL/dlogits of softmax cross-entropy.
pub fn ce_dlogits(probs: &[f64], y: usize) -> Vec<f64> {
    let mut d = probs.to_vec();
    d[y] -= 1.0;
    d
}

pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean loss and mean gradient over `batch`, where `per_instance` returns the
/// loss and dL/dlogits for one instance. Per-instance work may run in
/// parallel; the reduction runs in batch order.
pub fn batch_gradient<F>(
    model: &DiffClassifier,
    inputs: &[&[f64]],
    per_instance: F,
) -> Result<(f64, Gradient), ModelError>
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync + Send,
{
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n_params = model.n_params();
    let partials = exec::map_range(inputs.len(), |i| {
        let trace = model.forward_trace(inputs[i]);
        let (loss, dlogits) = per_instance(i, &trace.probs);
        let mut g = vec![0.0; n_params];
        model.backward(&trace, &dlogits, 1.0, &mut g);
        (loss, g)
    });
    let scale = 1.0 / inputs.len() as f64;
    let mut grad = Gradient::zeros(n_params);
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (acc, v) in grad.0.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    grad.scale(scale);
    if !grad.is_finite() {
        return Err(ModelError::Divergence);
    }
    Ok((loss * scale, grad))
}

/// Mean cross-entropy gradient over a batch of (input, label) pairs.
pub fn grad_params(model: &DiffClassifier, batch: &[(&[f64], usize)]) -> Result<Gradient, ModelError> {
    for (x, _) in batch {
        model.check_input(x)?;
    }
    let inputs: Vec<&[f64]> = batch.iter().map(|(x, _)| *x).collect();
    let (_, grad) = batch_gradient(model, &inputs, |i, probs| {
        let y = batch[i].1;
        (ce_loss(probs, y), ce_dlogits(probs, y))
    })?;
    Ok(grad)
}

pub fn sgd_step(model: &mut DiffClassifier, grad: &Gradient, lr: f64) -> Result<(), ModelError> {
    model.sgd_step(grad, lr)
}

/// Mean cross-entropy of `model` over encoded inputs.
pub fn mean_ce(model: &DiffClassifier, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let losses = exec::map_range(inputs.len(), |i| ce_loss(&model.probs(&inputs[i]), labels[i]));
    losses.iter().sum::<f64>() / inputs.len() as f64
}

pub fn accuracy(model: &DiffClassifier, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = exec::map_range(inputs.len(), |i| usize::from(model.predict_class(&inputs[i]) == labels[i]));
    hits.iter().sum::<usize>() as f64 / inputs.len() as f64
}
