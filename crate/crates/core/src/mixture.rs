//! Mixture of a black-box expert and a rule expert under a learned gate, and
//! the constrained gate optimization.
//!
//! For a covered instance the mixture is `g1(x) f(x) + g2(x) r(x)`; when the
//! rule expert abstains it is `f(x)` exactly. Training keeps the mixture's
//! task loss within `(1 + eps)` of a frozen baseline while pushing the gate
//! toward the rules, using an adaptive barrier coefficient per batch:
//!
//! ```text
//! phi      = min(alpha * (L_batch - (1 + eps) * L_baseline_batch), beta * |T|^2)
//! lambda_t = max((phi - I.T) / max(|T|^2, delta), 0)
//! omega   <- omega - lr * (I + lambda_t * T)
//! ```
//!
//! where `I` and `T` are the gate gradients of the interpretability loss
//! `-ln g2` and of the mixture task loss, accumulated over covered instances
//! and divided by the batch size.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Encoder};
use crate::exec;
use crate::models::{
    argmax, batch_gradient, ce_dlogits, ce_loss, mean_ce, softmax_backward, DiffClassifier, Gradient, ModelError,
    PROB_FLOOR,
};
use crate::rules::RuleSet;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training diverged: {0}; try a smaller learning rate")]
    Divergence(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub f: DiffClassifier,
    pub g: DiffClassifier,
    pub rules: RuleSet,
    pub encoder: Encoder,
    /// One-hot the gate at inference time.
    pub hard_gate: bool,
}

/// Per-instance view of the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOutput {
    pub probs: Vec<f64>,
    pub f_probs: Vec<f64>,
    pub gate: Vec<f64>,
    /// Class of the serving rule, `None` when the expert abstains.
    pub rule_class: Option<usize>,
    pub rule_id: Option<usize>,
}

impl MixtureOutput {
    /// Whether the prediction is attributed to the rule expert.
    pub fn uses_rule(&self) -> bool {
        self.rule_class.is_some() && self.gate[1] > 0.5
    }
}

/// `g1 * f + g2 * onehot(rule_class)`, or `f` when there is no rule.
pub fn mix(f_probs: &[f64], gate: &[f64], rule_class: Option<usize>) -> Vec<f64> {
    match rule_class {
        None => f_probs.to_vec(),
        Some(c) => {
            let mut out: Vec<f64> = f_probs.iter().map(|p| gate[0] * p).collect();
            out[c] += gate[1];
            out
        }
    }
}

impl MixtureModel {
    pub fn new(f: DiffClassifier, g: DiffClassifier, rules: RuleSet, encoder: Encoder) -> Self {
        Self {
            f,
            g,
            rules,
            encoder,
            hard_gate: false,
        }
    }

    pub fn explain_raw(&self, x: &[f64]) -> MixtureOutput {
        let enc = self.encoder.encode_unchecked(x);
        self.output(x, &enc)
    }

    /// Mixture output given the raw instance and its encoding.
    pub fn output(&self, raw: &[f64], encoded: &[f64]) -> MixtureOutput {
        let f_probs = self.f.probs(encoded);
        let mut gate = self.g.probs(encoded);
        if self.hard_gate {
            gate = if gate[1] > 0.5 { vec![0.0, 1.0] } else { vec![1.0, 0.0] };
        }
        let rule = self
            .rules
            .select(raw, &self.encoder.schema, &self.encoder.standardizer);
        let rule_class = rule.map(|r| r.class_index);
        MixtureOutput {
            probs: mix(&f_probs, &gate, rule_class),
            f_probs,
            gate,
            rule_class,
            rule_id: rule.map(|r| r.id),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.explain_raw(x).probs
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        argmax(&self.predict(x))
    }
}

pub fn mixture_predict(m: &MixtureModel, x: &[f64]) -> Vec<f64> {
    m.predict(x)
}

/// `-ln g2(x)` with g2 clamped below at 1e-12.
pub fn interpretability_loss(gate_probs: &[f64]) -> f64 {
    -gate_probs[1].clamp(PROB_FLOOR, 1.0).ln()
}

/// Training data with encodings and rule assignments precomputed.
pub struct TrainingView<'a> {
    pub data: &'a Dataset,
    pub encoded: Vec<Vec<f64>>,
    /// Rule expert output per instance; fixed while rules are unchanged.
    pub rule_class: Vec<Option<usize>>,
}

impl<'a> TrainingView<'a> {
    pub fn new(data: &'a Dataset, encoder: &Encoder, rules: &RuleSet) -> Self {
        let encoded = encoder.encode_dataset(data);
        let rule_class = exec::map_slice(&data.rows, |x| {
            rules.predict_class(x, &encoder.schema, &encoder.standardizer)
        });
        Self {
            data,
            encoded,
            rule_class,
        }
    }

    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }

    pub fn n_covered(&self) -> usize {
        self.rule_class.iter().filter(|c| c.is_some()).count()
    }
}

/// Mean mixture task loss over a view.
pub fn mixture_loss(m: &MixtureModel, view: &TrainingView) -> f64 {
    let losses = exec::map_range(view.len(), |i| {
        let x = &view.encoded[i];
        let f_probs = m.f.probs(x);
        let yhat = match view.rule_class[i] {
            None => f_probs,
            Some(c) => mix(&f_probs, &m.g.probs(x), Some(c)),
        };
        ce_loss(&yhat, view.data.labels[i])
    });
    losses.iter().sum::<f64>() / view.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 200,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbgdConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    /// 0 means one batch holding the whole training set.
    pub batch_size: usize,
    /// Floor on |T|^2 in the lambda denominator.
    pub grad_floor: f64,
}

impl Default for DbgdConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            alpha: 1.0,
            beta: 1.0,
            lr: 0.05,
            epochs: 30,
            batch_size: 0,
            grad_floor: 1e-12,
        }
    }
}

impl DbgdConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.epsilon >= 0.0) {
            return Err(TrainError::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(TrainError::Config("alpha and beta must be > 0".into()));
        }
        if !(self.grad_floor > 0.0) {
            return Err(TrainError::Config("grad_floor must be > 0".into()));
        }
        Ok(())
    }

    pub fn effective_batch_size(&self, n: usize) -> usize {
        match self.batch_size {
            0 => n.max(1),
            b => b,
        }
    }
}

/// Frozen copy of the unconstrained black box and its mean training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSnapshot {
    pub model: DiffClassifier,
    pub train_loss: f64,
}

/// Shuffled mini-batches of `0..n`.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One epoch of plain cross-entropy SGD.
pub fn sgd_epoch<R: Rng + ?Sized>(
    f: &mut DiffClassifier,
    encoded: &[Vec<f64>],
    labels: &[usize],
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<(), TrainError> {
    for batch in shuffled_batches(encoded.len(), cfg.batch_size, rng) {
        let inputs: Vec<&[f64]> = batch.iter().map(|&i| encoded[i].as_slice()).collect();
        let (_, grad) = batch_gradient(f, &inputs, |k, probs| {
            let y = labels[batch[k]];
            (ce_loss(probs, y), ce_dlogits(probs, y))
        })
        .map_err(|e| TrainError::Divergence(e.to_string()))?;
        f.sgd_step(&grad, cfg.lr)?;
    }
    Ok(())
}

/// Unconstrained training of the black box; returns the frozen baseline.
pub fn init_train<R: Rng + ?Sized>(
    f: &mut DiffClassifier,
    train: &Dataset,
    encoder: &Encoder,
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<BaselineSnapshot, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    let encoded = encoder.encode_dataset(train);
    for _ in 0..cfg.epochs {
        sgd_epoch(f, &encoded, &train.labels, cfg, rng)?;
    }
    let train_loss = mean_ce(f, &encoded, &train.labels);
    if !train_loss.is_finite() {
        return Err(TrainError::Divergence("non-finite baseline loss".into()));
    }
    Ok(BaselineSnapshot {
        model: f.clone(),
        train_loss,
    })
}

pub fn compute_phi(batch_loss: f64, baseline_batch_loss: f64, task_grad: &Gradient, cfg: &DbgdConfig) -> f64 {
    let violation = cfg.alpha * (batch_loss - (1.0 + cfg.epsilon) * baseline_batch_loss);
    violation.min(cfg.beta * task_grad.norm_sq())
}

pub fn compute_lambda(int_grad: &Gradient, task_grad: &Gradient, phi: f64, grad_floor: f64) -> f64 {
    let norm_sq = task_grad.norm_sq();
    if norm_sq < grad_floor {
        return 0.0;
    }
    ((phi - int_grad.dot(task_grad)) / norm_sq.max(grad_floor)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbgdStepTrace {
    pub epoch: usize,
    pub batch: usize,
    pub covered: usize,
    pub batch_loss: f64,
    pub baseline_batch_loss: f64,
    pub phi: f64,
    pub lambda: f64,
    /// I.T
    pub int_dot_task: f64,
    /// |T|^2
    pub task_norm_sq: f64,
    pub int_norm_sq: f64,
}

/// θ gradient of the mixture loss over a batch: plain cross-entropy for
/// uncovered instances, the mixture derivative for covered ones.
fn theta_step(m: &mut MixtureModel, view: &TrainingView, batch: &[usize], lr: f64) -> Result<(), TrainError> {
    let inputs: Vec<&[f64]> = batch.iter().map(|&i| view.encoded[i].as_slice()).collect();
    let g = &m.g;
    let (_, grad) = batch_gradient(&m.f, &inputs, |k, probs| {
        let i = batch[k];
        let y = view.data.labels[i];
        match view.rule_class[i] {
            None => (ce_loss(probs, y), ce_dlogits(probs, y)),
            Some(c) => {
                let gate = g.probs(&view.encoded[i]);
                let yhat = mix(probs, &gate, Some(c));
                let mut dprobs = vec![0.0; probs.len()];
                if yhat[y] > PROB_FLOOR {
                    dprobs[y] = -gate[0] / yhat[y];
                }
                (ce_loss(&yhat, y), softmax_backward(probs, &dprobs))
            }
        }
    })
    .map_err(|e| TrainError::Divergence(e.to_string()))?;
    m.f.sgd_step(&grad, lr)?;
    Ok(())
}

/// Gate gradients for one batch, each divided by the batch size.
pub struct GateGradients {
    /// Interpretability-loss gradient over covered instances.
    pub int_grad: Gradient,
    /// Task-loss gradient over covered instances.
    pub task_grad: Gradient,
    pub covered: usize,
    /// Mean mixture loss over the whole batch.
    pub batch_loss: f64,
}

/// dL/dlogits of the gate for the mixture task loss on one covered instance.
pub fn gate_task_dlogits(f_probs: &[f64], gate: &[f64], rule_class: usize, y: usize) -> (f64, Vec<f64>) {
    let yhat = mix(f_probs, gate, Some(rule_class));
    let loss = ce_loss(&yhat, y);
    if yhat[y] <= PROB_FLOOR {
        return (loss, vec![0.0; 2]);
    }
    let r_y = if rule_class == y { 1.0 } else { 0.0 };
    let dgate = [-f_probs[y] / yhat[y], -r_y / yhat[y]];
    (loss, softmax_backward(gate, &dgate))
}

/// dL/dlogits of the gate for `-ln g2`.
pub fn gate_int_dlogits(gate: &[f64]) -> Vec<f64> {
    if gate[1] < PROB_FLOOR {
        return vec![0.0; 2];
    }
    vec![gate[0], gate[1] - 1.0]
}

pub fn gate_gradients(m: &MixtureModel, view: &TrainingView, batch: &[usize]) -> GateGradients {
    let n_params = m.g.n_params();
    let per = exec::map_slice(batch, |&i| {
        let x = &view.encoded[i];
        let y = view.data.labels[i];
        let f_probs = m.f.probs(x);
        match view.rule_class[i] {
            None => (ce_loss(&f_probs, y), None),
            Some(c) => {
                let trace = m.g.forward_trace(x);
                let (loss, d_task) = gate_task_dlogits(&f_probs, &trace.probs, c, y);
                let d_int = gate_int_dlogits(&trace.probs);
                let mut gi = vec![0.0; n_params];
                let mut gt = vec![0.0; n_params];
                m.g.backward(&trace, &d_int, 1.0, &mut gi);
                m.g.backward(&trace, &d_task, 1.0, &mut gt);
                (loss, Some((gi, gt)))
            }
        }
    });
    let scale = 1.0 / batch.len() as f64;
    let mut int_grad = Gradient::zeros(n_params);
    let mut task_grad = Gradient::zeros(n_params);
    let mut loss = 0.0;
    let mut covered = 0;
    for (l, grads) in per {
        loss += l;
        if let Some((gi, gt)) = grads {
            covered += 1;
            for (acc, v) in int_grad.0.iter_mut().zip(&gi) {
                *acc += v;
            }
            for (acc, v) in task_grad.0.iter_mut().zip(&gt) {
                *acc += v;
            }
        }
    }
    int_grad.scale(scale);
    task_grad.scale(scale);
    GateGradients {
        int_grad,
        task_grad,
        covered,
        batch_loss: loss * scale,
    }
}

/// One epoch of the constrained optimization. Per batch: a descent step on θ
/// over every instance, then a barrier-weighted step on ω from the covered
/// instances only (skipped when none are covered).
pub fn dbgd_epoch<R: Rng + ?Sized>(
    m: &mut MixtureModel,
    view: &TrainingView,
    baseline: &BaselineSnapshot,
    cfg: &DbgdConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<Vec<DbgdStepTrace>, TrainError> {
    cfg.validate()?;
    let mut traces = Vec::new();
    let batch_size = cfg.effective_batch_size(view.len());
    for (b, batch) in shuffled_batches(view.len(), batch_size, rng).into_iter().enumerate() {
        theta_step(m, view, &batch, cfg.lr)?;
        let gg = gate_gradients(m, view, &batch);
        let baseline_batch_loss =
            batch.iter().map(|&i| ce_loss(&baseline.model.probs(&view.encoded[i]), view.data.labels[i])).sum::<f64>()
                / batch.len() as f64;
        let phi = compute_phi(gg.batch_loss, baseline_batch_loss, &gg.task_grad, cfg);
        let lambda = compute_lambda(&gg.int_grad, &gg.task_grad, phi, cfg.grad_floor);
        let trace = DbgdStepTrace {
            epoch,
            batch: b,
            covered: gg.covered,
            batch_loss: gg.batch_loss,
            baseline_batch_loss,
            phi,
            lambda,
            int_dot_task: gg.int_grad.dot(&gg.task_grad),
            task_norm_sq: gg.task_grad.norm_sq(),
            int_norm_sq: gg.int_grad.norm_sq(),
        };
        let finite = [trace.batch_loss, trace.phi, trace.lambda, trace.int_dot_task, trace.task_norm_sq]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !gg.int_grad.is_finite() || !gg.task_grad.is_finite() {
            return Err(TrainError::Divergence(format!("non-finite trace at epoch {epoch}, batch {b}")));
        }
        if gg.covered > 0 {
            let mut step = gg.int_grad;
            step.axpy(lambda, &gg.task_grad);
            m.g.sgd_step(&step, cfg.lr)?;
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// Comparison optimizer: θ as in [`dbgd_epoch`], ω by SGD on
/// `l_int + lambda * l_task` over covered instances.
pub fn linear_combo_epoch<R: Rng + ?Sized>(
    m: &mut MixtureModel,
    view: &TrainingView,
    lambda: f64,
    cfg: &DbgdConfig,
    rng: &mut R,
) -> Result<(), TrainError> {
    if !(lambda >= 0.0) {
        return Err(TrainError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    cfg.validate()?;
    for batch in shuffled_batches(view.len(), cfg.effective_batch_size(view.len()), rng) {
        theta_step(m, view, &batch, cfg.lr)?;
        let gg = gate_gradients(m, view, &batch);
        if !gg.int_grad.is_finite() || !gg.task_grad.is_finite() {
            return Err(TrainError::Divergence("non-finite gate gradient".into()));
        }
        if gg.covered > 0 {
            let mut step = gg.int_grad;
            step.axpy(lambda, &gg.task_grad);
            m.g.sgd_step(&step, cfg.lr)?;
        }
    }
    Ok(())
}
