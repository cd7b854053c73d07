//! Imitation-learning training loop: Adam with bias correction, cosine
//! learning-rate decay, seeded minibatch shuffling, and early stopping on
//! the training loss.
//!
//! Determinism contract: with a fixed seed and a fixed dataset, parameter
//! initialization, shuffle order, every update, and therefore the whole
//! loss series are bit-identical across runs. The loop keeps the
//! best-loss parameter snapshot and returns it, never a worse one; a
//! non-finite loss aborts the run and returns the last good snapshot.

use std::time::Instant;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_cross_entropy, Tape};
use crate::error::{Error, Result};
use crate::labels::WindowedDataset;
use crate::wattnet::{forward_on_tape, init_params, ModelParams, WattNetConfig};

/// Optimizer and loop hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Cosine schedule start (step 0).
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    /// Cosine schedule end (final step).
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without ≥ `early_stop_min_delta` improvement before stopping.
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_min_delta")]
    pub early_stop_min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Training never sees windows labeled on or after this date; violating
    /// datasets are rejected before the first step.
    #[serde(default)]
    pub date_fence: Option<NaiveDate>,
    /// Log one line per epoch to standard output.
    #[serde(default)]
    pub verbose: bool,
}

fn default_lr_start() -> f64 {
    6e-4
}
fn default_lr_end() -> f64 {
    3e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    20
}
fn default_min_delta() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: default_lr_start(),
            lr_end: default_lr_end(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            early_stop_patience: default_patience(),
            early_stop_min_delta: default_min_delta(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            date_fence: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.early_stop_min_delta < 0.0 {
            return Err(Error::Config("early_stop_min_delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Cosine decay `lr_end + ½·(lr_start − lr_end)·(1 + cos(π·step/total))`.
/// Exactly `lr_start` at step 0 and exactly `lr_end` at the final step;
/// monotone non-increasing in between.
pub fn cosine_lr(step: u64, total_steps: u64, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond schedule horizon {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Adam moment buffers; one slot per parameter tensor, allocated on first
/// use to match the gradient shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(tc: &TrainConfig) -> Self {
        AdamState::new(tc.beta1, tc.beta2, tc.eps)
    }
}

/// One bias-corrected Adam update, in place. `params` and `grads` must be
/// aligned tensor-for-tensor. Errors on any non-finite gradient, leaving
/// parameters untouched.
pub fn adam_step(
    params: &mut [&mut Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors vs {} gradient tensors",
            params.len(),
            grads.len()
        )));
    }
    for (ti, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "tensor {ti}: {} params vs {} gradients",
                p.len(),
                g.len()
            )));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Compute(format!(
                "non-finite gradient {bad} in tensor {ti} at optimizer step {}",
                state.step + 1
            )));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Why training stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Diverged,
}

/// Outcome of one training run. Serializes to JSON; wall-clock time is
/// carried in memory only so that report files stay byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per completed epoch (finite by construction).
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    /// 1-based epoch of the returned parameters (0 = initialization, only
    /// possible when divergence struck before any epoch completed).
    pub best_epoch: usize,
    pub best_loss: f64,
    pub total_steps: u64,
    /// Learning rate of the last executed step.
    pub final_lr: f64,
    /// Set by callers that save the returned parameters to disk.
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Train a fresh WATTNet on the windowed dataset by behavioral cloning:
/// minimize mean cross-entropy between predicted tenor logits and the
/// dataset's labels over seeded-shuffled minibatches.
pub fn train(
    model_cfg: &WattNetConfig,
    dataset: &WindowedDataset,
    tc: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let started = Instant::now();
    model_cfg.validate()?;
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    if dataset.n_features() != model_cfg.input_width {
        return Err(Error::Shape(format!(
            "dataset rows have {} features, model expects {}",
            dataset.n_features(),
            model_cfg.input_width
        )));
    }
    if dataset.t_len != model_cfg.window_len {
        return Err(Error::Shape(format!(
            "dataset windows span {} steps, model expects {}",
            dataset.t_len,
            model_cfg.window_len
        )));
    }
    if let Some(fence) = tc.date_fence {
        for s in &dataset.samples {
            if s.date >= fence {
                return Err(Error::Validation(format!(
                    "window labeled {} is not strictly before the {fence} date fence",
                    s.date
                )));
            }
        }
    }
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.label >= model_cfg.n_classes {
            return Err(Error::Validation(format!(
                "sample {i} has label {} outside {} classes",
                s.label, model_cfg.n_classes
            )));
        }
    }

    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(tc.batch_size);
    let total_steps = (tc.max_epochs * batches_per_epoch) as u64;
    let row_len = model_cfg.window_len * model_cfg.input_width;

    let mut params = init_params(model_cfg, tc.seed)?;
    let mut adam = AdamState::from_config(tc);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..n).collect();

    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut patience_anchor = f64::INFINITY;
    let mut epochs_since_improvement = 0usize;
    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut step = 0u64;
    let mut final_lr = tc.lr_start;
    let mut stop_reason = StopReason::MaxEpochs;

    let mut batch_x = vec![0.0f64; tc.batch_size * row_len];
    'epochs: for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let bn = chunk.len();
            let mut labels = Vec::with_capacity(bn);
            for (slot, &si) in chunk.iter().enumerate() {
                batch_x[slot * row_len..(slot + 1) * row_len].copy_from_slice(dataset.window(si));
                labels.push(dataset.samples[si].label);
            }
            let lr = cosine_lr(step, total_steps, tc.lr_start, tc.lr_end)?;
            final_lr = lr;
            let tape = Tape::new();
            let pass = forward_on_tape(&tape, &params, &batch_x[..bn * row_len], bn)?;
            let loss = softmax_cross_entropy(&pass.logits, &labels)?;
            let loss_val = loss.scalar()?;
            if !loss_val.is_finite() {
                stop_reason = StopReason::Diverged;
                break 'epochs;
            }
            loss.backward()?;
            let grads: Vec<Vec<f64>> = pass
                .param_leaves
                .iter()
                .map(|leaf| leaf.grad_or_zeros())
                .collect();
            let mut tensors = params.tensors_mut();
            match adam_step(&mut tensors, &grads, &mut adam, lr) {
                Ok(()) => {}
                Err(Error::Compute(_)) => {
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            loss_sum += loss_val * bn as f64;
            step += 1;
        }
        let epoch_loss = loss_sum / n as f64;
        epoch_losses.push(epoch_loss);
        if tc.verbose {
            println!(
                "epoch {epoch}/{}: loss {epoch_loss:.6} lr {final_lr:.6e}",
                tc.max_epochs
            );
        }
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch_loss < patience_anchor - tc.early_stop_min_delta {
            patience_anchor = epoch_loss;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= tc.early_stop_patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let report = TrainReport {
        epochs_run: epoch_losses.len(),
        epoch_losses,
        stop_reason,
        best_epoch,
        best_loss,
        total_steps,
        final_lr,
        checkpoint: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_params, report))
}

/// Fraction (as a percent) of dataset samples whose predicted class equals
/// the stored label — the training-accuracy diagnostic used by capacity
/// tests and epoch summaries.
pub fn dataset_accuracy(params: &ModelParams, dataset: &WindowedDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let mut hits = 0usize;
    for i in 0..dataset.len() {
        let pred = crate::wattnet::predict_tenor(params, dataset.window(i))?;
        if pred == dataset.samples[i].label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / dataset.len() as f64)
}
