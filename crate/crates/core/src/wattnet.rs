//! The WATTNet model: a per-time-step compression layer, a stack of
//! WATTBlocks (gated dilated grouped temporal convolution followed by
//! residual per-time-slice attention across series), and a two-layer
//! classification head over the flattened final latent.
//!
//! Width progression for the paper-scale default: 1123 → 90 per block → 90,
//! then the head maps T_final·90 → 512 → 91 tenor classes. Every block
//! shrinks the window by `kernel_size · dilation` steps, so configurations
//! whose schedule consumes the whole window are rejected at validation —
//! loudly, before any parameter is allocated.
//!
//! The dilation schedule is a plain config field. The default resets every
//! two blocks ([1, 2, 1, 2, …]) so that the paper-scale stack of eight
//! blocks fits a 30-step window; steeper schedules such as
//! `[2, 4, 2, 4, …]` remain runnable with longer windows and are refused
//! otherwise by the same shape audit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    dense, gated_activation, grouped_dilated_conv, read_checkpoint, residual_attention_block,
    write_checkpoint, Tape, Tensor,
};
use crate::error::{Error, Result};

/// Architecture hyper-parameters. Serializable so checkpoints embed the
/// exact architecture they were trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WattNetConfig {
    /// Input feature count per time step (M_in).
    #[serde(default = "default_input_width")]
    pub input_width: usize,
    /// Series count after compression (M); each series gets its own conv
    /// kernel and attention token.
    #[serde(default = "default_compressed_width")]
    pub compressed_width: usize,
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    /// Temporal kernel taps per series (k).
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    /// Per-block dilation; length must equal `n_blocks`.
    #[serde(default = "default_dilation_schedule")]
    pub dilation_schedule: Vec<usize>,
    /// Attention key/query width.
    #[serde(default = "default_d_k")]
    pub d_k: usize,
    /// Hidden width of the classification head.
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    /// Tenor classes (a_max + 1, class 0 = no trade).
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    /// Input window length in trading days (T).
    #[serde(default = "default_window_len")]
    pub window_len: usize,
}

fn default_input_width() -> usize {
    1123
}
fn default_compressed_width() -> usize {
    90
}
fn default_n_blocks() -> usize {
    8
}
fn default_kernel_size() -> usize {
    2
}
fn default_dilation_schedule() -> Vec<usize> {
    vec![1, 2, 1, 2, 1, 2, 1, 2]
}
fn default_d_k() -> usize {
    16
}
fn default_head_hidden() -> usize {
    512
}
fn default_n_classes() -> usize {
    91
}
fn default_window_len() -> usize {
    30
}

impl Default for WattNetConfig {
    fn default() -> Self {
        WattNetConfig {
            input_width: default_input_width(),
            compressed_width: default_compressed_width(),
            n_blocks: default_n_blocks(),
            kernel_size: default_kernel_size(),
            dilation_schedule: default_dilation_schedule(),
            d_k: default_d_k(),
            head_hidden: default_head_hidden(),
            n_classes: default_n_classes(),
            window_len: default_window_len(),
        }
    }
}

impl WattNetConfig {
    /// Reject any configuration that cannot produce a non-empty final
    /// latent or has degenerate widths.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_width", self.input_width),
            ("compressed_width", self.compressed_width),
            ("n_blocks", self.n_blocks),
            ("kernel_size", self.kernel_size),
            ("d_k", self.d_k),
            ("head_hidden", self.head_hidden),
            ("window_len", self.window_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be >= 2 (a_max >= 1), got {}",
                self.n_classes
            )));
        }
        if self.dilation_schedule.len() != self.n_blocks {
            return Err(Error::Config(format!(
                "dilation_schedule has {} entries for {} blocks",
                self.dilation_schedule.len(),
                self.n_blocks
            )));
        }
        if let Some(d) = self.dilation_schedule.iter().find(|&&d| d == 0) {
            return Err(Error::Config(format!("dilation {d} must be >= 1")));
        }
        self.t_chain().map(|_| ())
    }

    /// Window length entering each block and leaving the last one:
    /// `[T, T−k·d_1, …, T_final]`. Errors if any block would consume its
    /// whole input window.
    pub fn t_chain(&self) -> Result<Vec<usize>> {
        let mut chain = Vec::with_capacity(self.n_blocks + 1);
        let mut t = self.window_len;
        chain.push(t);
        for (i, &d) in self.dilation_schedule.iter().enumerate() {
            let shrink = self.kernel_size * d;
            if t <= shrink {
                return Err(Error::Config(format!(
                    "block {} (dilation {d}) needs window > {shrink}, but only {t} steps remain \
                     of the original {}; shorten the schedule or lengthen the window",
                    i + 1,
                    self.window_len
                )));
            }
            t -= shrink;
            chain.push(t);
        }
        Ok(chain)
    }

    /// Time steps in the final latent.
    pub fn t_final(&self) -> Result<usize> {
        Ok(*self.t_chain()?.last().unwrap())
    }

    /// Feature-width progression through the network:
    /// input → compression → each block → head hidden → classes.
    pub fn m_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.input_width, self.compressed_width];
        chain.extend(std::iter::repeat(self.compressed_width).take(self.n_blocks));
        chain.push(self.head_hidden);
        chain.push(self.n_classes);
        chain
    }

    /// Total learnable parameters:
    /// `M_in·M + M  +  n_blocks·(2·M·k + 2·d_k² + 2·d_k)  +
    ///  T_final·M·H + H  +  H·C + C`.
    pub fn param_count(&self) -> Result<usize> {
        let (m_in, m) = (self.input_width, self.compressed_width);
        let (k, dk) = (self.kernel_size, self.d_k);
        let (h, c) = (self.head_hidden, self.n_classes);
        let t_f = self.t_final()?;
        Ok(m_in * m + m
            + self.n_blocks * (2 * m * k + 2 * dk * dk + 2 * dk)
            + t_f * m * h
            + h
            + h * c
            + c)
    }

    /// Tensor names and shapes in canonical order. This single list defines
    /// the initialization draw order, the optimizer's parameter order, and
    /// the checkpoint layout.
    pub fn tensor_layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let (m_in, m) = (self.input_width, self.compressed_width);
        let (k, dk) = (self.kernel_size, self.d_k);
        let t_f = self.t_final()?;
        let mut layout = vec![
            ("compress.w".to_string(), vec![m_in, m]),
            ("compress.b".to_string(), vec![m]),
        ];
        for i in 0..self.n_blocks {
            layout.push((format!("block{i}.conv_alpha"), vec![m, k]));
            layout.push((format!("block{i}.conv_beta"), vec![m, k]));
            layout.push((format!("block{i}.attn_u"), vec![dk]));
            layout.push((format!("block{i}.attn_wq"), vec![dk, dk]));
            layout.push((format!("block{i}.attn_wk"), vec![dk, dk]));
            layout.push((format!("block{i}.attn_wv"), vec![dk]));
        }
        layout.push(("head1.w".to_string(), vec![t_f * m, self.head_hidden]));
        layout.push(("head1.b".to_string(), vec![self.head_hidden]));
        layout.push(("head2.w".to_string(), vec![self.head_hidden, self.n_classes]));
        layout.push(("head2.b".to_string(), vec![self.n_classes]));
        Ok(layout)
    }

    /// Fan-in used for the ±1/√fan_in initialization of a tensor, keyed by
    /// its canonical name.
    fn fan_in(&self, name: &str) -> Result<usize> {
        let t_f = self.t_final()?;
        Ok(match name {
            n if n.starts_with("compress.") => self.input_width,
            n if n.contains(".conv_") => self.kernel_size,
            n if n.contains(".attn_") => self.d_k,
            n if n.starts_with("head1.") => t_f * self.compressed_width,
            n if n.starts_with("head2.") => self.head_hidden,
            other => return Err(Error::Config(format!("unknown tensor {other}"))),
        })
    }
}

/// One WATTBlock's learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// Gate-branch conv kernels, M×k.
    pub conv_alpha: Vec<f64>,
    /// Filter-branch conv kernels, M×k.
    pub conv_beta: Vec<f64>,
    /// Shared token lift, d_k.
    pub attn_u: Vec<f64>,
    /// Query projection, d_k×d_k.
    pub attn_wq: Vec<f64>,
    /// Key projection, d_k×d_k.
    pub attn_wk: Vec<f64>,
    /// Value projection, d_k.
    pub attn_wv: Vec<f64>,
}

/// All learnable tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: WattNetConfig,
    /// Per-time-step compression, M_in×M (+ bias M).
    pub compress_w: Vec<f64>,
    pub compress_b: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    /// Head layer 1, (T_final·M)×H (+ bias H).
    pub head1_w: Vec<f64>,
    pub head1_b: Vec<f64>,
    /// Head layer 2, H×C (+ bias C).
    pub head2_w: Vec<f64>,
    pub head2_b: Vec<f64>,
}

impl ModelParams {
    /// Borrow every tensor with its canonical name and shape, in layout
    /// order.
    pub fn named_tensors(&self) -> Result<Vec<(String, Vec<usize>, &Vec<f64>)>> {
        let layout = self.config.tensor_layout()?;
        let tensors = self.tensor_refs();
        debug_assert_eq!(layout.len(), tensors.len());
        Ok(layout
            .into_iter()
            .zip(tensors)
            .map(|((name, shape), data)| (name, shape, data))
            .collect())
    }

    fn tensor_refs(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.compress_w, &self.compress_b];
        for b in &self.blocks {
            out.extend([
                &b.conv_alpha,
                &b.conv_beta,
                &b.attn_u,
                &b.attn_wq,
                &b.attn_wk,
                &b.attn_wv,
            ]);
        }
        out.extend([&self.head1_w, &self.head1_b, &self.head2_w, &self.head2_b]);
        out
    }

    /// Mutable views in the same canonical order (optimizer update path).
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.compress_w, &mut self.compress_b];
        for b in &mut self.blocks {
            out.push(&mut b.conv_alpha);
            out.push(&mut b.conv_beta);
            out.push(&mut b.attn_u);
            out.push(&mut b.attn_wq);
            out.push(&mut b.attn_wk);
            out.push(&mut b.attn_wv);
        }
        out.push(&mut self.head1_w);
        out.push(&mut self.head1_b);
        out.push(&mut self.head2_w);
        out.push(&mut self.head2_b);
        out
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.tensor_refs().iter().map(|t| t.len()).sum()
    }

    /// True iff every scalar is finite.
    pub fn all_finite(&self) -> bool {
        self.tensor_refs()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Write parameters (and the architecture, in the header metadata) to a
    /// checkpoint file. Bit-exact round trip.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "model": "wattnet",
            "config": serde_json::to_value(&self.config)
                .map_err(|e| Error::Validation(format!("config serialization: {e}")))?,
        });
        let named = self.named_tensors()?;
        let tensors: Vec<(&str, &[usize], &[f64])> = named
            .iter()
            .map(|(name, shape, data)| (name.as_str(), shape.as_slice(), data.as_slice()))
            .collect();
        write_checkpoint(path, &meta, &tensors)
    }

    /// Load a checkpoint written by [`ModelParams::save`], validating the
    /// embedded architecture and every tensor shape.
    pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
        let path = path.as_ref();
        let loc = path.display().to_string();
        let (meta, tensors) = read_checkpoint(path)?;
        let config: WattNetConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Validation(format!("{loc}: checkpoint lacks a config")))?,
        )
        .map_err(|e| Error::Validation(format!("{loc}: bad config in checkpoint: {e}")))?;
        let layout = config.tensor_layout()?;
        if tensors.len() != layout.len() {
            return Err(Error::Validation(format!(
                "{loc}: {} tensors, architecture needs {}",
                tensors.len(),
                layout.len()
            )));
        }
        let mut data = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, got_shape, values)) in layout.iter().zip(tensors) {
            if *name != got_name || *shape != got_shape {
                return Err(Error::Validation(format!(
                    "{loc}: expected tensor {name} {shape:?}, found {got_name} {got_shape:?}"
                )));
            }
            data.push(values);
        }
        Ok(assemble(config, data))
    }
}

/// Build a `ModelParams` from tensors already in canonical order.
fn assemble(config: WattNetConfig, mut data: Vec<Vec<f64>>) -> ModelParams {
    let mut it = data.drain(..);
    let compress_w = it.next().unwrap();
    let compress_b = it.next().unwrap();
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        blocks.push(BlockParams {
            conv_alpha: it.next().unwrap(),
            conv_beta: it.next().unwrap(),
            attn_u: it.next().unwrap(),
            attn_wq: it.next().unwrap(),
            attn_wk: it.next().unwrap(),
            attn_wv: it.next().unwrap(),
        });
    }
    let head1_w = it.next().unwrap();
    let head1_b = it.next().unwrap();
    let head2_w = it.next().unwrap();
    let head2_b = it.next().unwrap();
    drop(it);
    ModelParams {
        config,
        compress_w,
        compress_b,
        blocks,
        head1_w,
        head1_b,
        head2_w,
        head2_b,
    }
}

/// Draw fresh parameters, uniform in ±1/√fan_in per layer. Deterministic:
/// tensors are drawn in canonical layout order from a ChaCha8 stream.
pub fn init_params(config: &WattNetConfig, seed: u64) -> Result<ModelParams> {
    let layout = config.tensor_layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let bound = 1.0 / (config.fan_in(name)? as f64).sqrt();
        let numel: usize = shape.iter().product();
        data.push(
            (0..numel)
                .map(|_| rng.gen_range(-bound..bound))
                .collect::<Vec<f64>>(),
        );
    }
    Ok(assemble(config.clone(), data))
}

/// All zeros (useful for constant-propagation tests and as an Adam-state
/// template).
pub fn zero_params(config: &WattNetConfig) -> Result<ModelParams> {
    let layout = config.tensor_layout()?;
    let data = layout
        .iter()
        .map(|(_, shape)| vec![0.0; shape.iter().product()])
        .collect();
    Ok(assemble(config.clone(), data))
}

/// Everything the caller may need from one recorded forward pass: the graph
/// stays alive through these handles, so `loss.backward()` can run and
/// gradients can be read off `inputs` and `param_leaves`.
pub struct ForwardPass {
    /// The input leaf, shape N×T×M_in.
    pub inputs: Tensor,
    /// Parameter leaves in canonical layout order (matches
    /// [`ModelParams::tensors_mut`]).
    pub param_leaves: Vec<Tensor>,
    /// Final-block latent, N×T_final×M.
    pub latent: Tensor,
    /// Un-normalized class scores, N×n_classes.
    pub logits: Tensor,
}

/// Record the full network onto `tape` for a batch of `n` windows given as
/// a flat row-major N×T×M_in slice.
pub fn forward_on_tape(tape: &Tape, params: &ModelParams, x: &[f64], n: usize) -> Result<ForwardPass> {
    let cfg = &params.config;
    cfg.validate()?;
    let (t, m_in, m) = (cfg.window_len, cfg.input_width, cfg.compressed_width);
    if n == 0 {
        return Err(Error::Shape("forward needs at least one window".into()));
    }
    if x.len() != n * t * m_in {
        return Err(Error::Shape(format!(
            "input has {} values, expected {n}×{t}×{m_in} = {}",
            x.len(),
            n * t * m_in
        )));
    }

    let inputs = tape.leaf(&[n, t, m_in], x.to_vec())?;
    let mut param_leaves = Vec::new();
    for (_, shape, data) in params.named_tensors()? {
        param_leaves.push(tape.leaf(&shape, data.clone())?);
    }

    // Canonical layout order: compress (2), blocks (6 each), head (4).
    let compress_w = &param_leaves[0];
    let compress_b = &param_leaves[1];

    // Compression: one dense layer applied to every time step, weights
    // shared across steps and batch entries.
    let x2d = inputs.reshape(&[n * t, m_in])?;
    let mut cur = dense(&x2d, compress_w, compress_b)?.reshape(&[n, t, m])?;

    for (i, d) in cfg.dilation_schedule.iter().enumerate() {
        let base = 2 + 6 * i;
        let conv_alpha = &param_leaves[base];
        let conv_beta = &param_leaves[base + 1];
        let attn_u = &param_leaves[base + 2];
        let attn_wq = &param_leaves[base + 3];
        let attn_wk = &param_leaves[base + 4];
        let attn_wv = &param_leaves[base + 5];
        let gated = gated_activation(
            &grouped_dilated_conv(&cur, conv_alpha, cfg.kernel_size, *d)?,
            &grouped_dilated_conv(&cur, conv_beta, cfg.kernel_size, *d)?,
        )?;
        cur = residual_attention_block(&gated, attn_u, attn_wq, attn_wk, attn_wv, cfg.d_k)?;
    }

    let latent = cur;
    let t_f = cfg.t_final()?;
    let head_base = 2 + 6 * cfg.n_blocks;
    let flat = latent.reshape(&[n, t_f * m])?;
    let hidden = dense(&flat, &param_leaves[head_base], &param_leaves[head_base + 1])?;
    let logits = dense(
        &hidden,
        &param_leaves[head_base + 2],
        &param_leaves[head_base + 3],
    )?;

    Ok(ForwardPass {
        inputs,
        param_leaves,
        latent,
        logits,
    })
}

/// Forward pass returning plain values: (logits N×C, latent N×T_final×M).
pub fn forward(params: &ModelParams, x: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let pass = forward_on_tape(&tape, params, x, n)?;
    Ok((pass.logits.value(), pass.latent.value()))
}

/// Final-block latent only.
pub fn latent(params: &ModelParams, x: &[f64], n: usize) -> Result<Vec<f64>> {
    let tape = Tape::new();
    Ok(forward_on_tape(&tape, params, x, n)?.latent.value())
}

/// Index of the row maximum; ties resolve to the smaller index. Softmax is
/// monotone, so this is also the argmax of the class probabilities.
pub fn argmax_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted tenor class for a single window (flat T×M_in values).
pub fn predict_tenor(params: &ModelParams, window: &[f64]) -> Result<usize> {
    let (logits, _) = forward(params, window, 1)?;
    Ok(argmax_class(&logits))
}

/// Predicted tenor classes for a batch of windows.
pub fn predict_batch(params: &ModelParams, x: &[f64], n: usize) -> Result<Vec<usize>> {
    let (logits, _) = forward(params, x, n)?;
    let c = params.config.n_classes;
    Ok(logits.chunks_exact(c).map(argmax_class).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, softmax_cross_entropy};

    /// Small architecture used across the tests: M_in 5 → M 4, two blocks.
    fn tiny_config() -> WattNetConfig {
        WattNetConfig {
            input_width: 5,
            compressed_width: 4,
            n_blocks: 2,
            kernel_size: 2,
            dilation_schedule: vec![1, 2],
            d_k: 3,
            head_hidden: 8,
            n_classes: 5,
            window_len: 12,
        }
    }

    fn rand_input(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn default_config_is_buildable_paper_scale() {
        let cfg = WattNetConfig::default();
        cfg.validate().unwrap();
        // T: 30 →28→24→22→18→16→12→10→ 6.
        assert_eq!(cfg.t_chain().unwrap(), vec![30, 28, 24, 22, 18, 16, 12, 10, 6]);
        assert_eq!(cfg.t_final().unwrap(), 6);
        // Width chain 1123 → 90 → … → 90 → 512 → 91.
        let m = cfg.m_chain();
        assert_eq!(m.first(), Some(&1123));
        assert_eq!(m[1], 90);
        assert!(m[1..=9].iter().all(|&w| w == 90));
        assert_eq!(m[m.len() - 2], 512);
        assert_eq!(m.last(), Some(&91));
    }

    #[test]
    fn steep_schedule_rejected_at_short_window_allowed_at_long() {
        let steep = WattNetConfig {
            dilation_schedule: vec![2, 4, 2, 4, 2, 4, 2, 4],
            ..WattNetConfig::default()
        };
        // 2·(2+4)·4 = 48 > 29 usable steps: must be rejected loudly.
        let err = steep.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let long = WattNetConfig {
            window_len: 49,
            ..steep
        };
        long.validate().unwrap();
        assert_eq!(long.t_final().unwrap(), 1);
    }

    #[test]
    fn config_rejects_degenerate_fields() {
        let mut c = tiny_config();
        c.dilation_schedule = vec![1, 2, 3];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_classes = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.dilation_schedule = vec![1, 0];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.window_len = 6; // blocks need 2·(1+2) = 6 < window
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_matches_closed_form_and_layout() {
        for cfg in [tiny_config(), WattNetConfig::default()] {
            let params = init_params(&cfg, 7).unwrap();
            assert_eq!(params.n_params(), cfg.param_count().unwrap());
            let layout_total: usize = cfg
                .tensor_layout()
                .unwrap()
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            assert_eq!(layout_total, cfg.param_count().unwrap());
        }
    }

    #[test]
    fn init_is_deterministic_bounded_and_finite() {
        let cfg = tiny_config();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        for ((_, _, ta), (_, _, tb)) in a
            .named_tensors()
            .unwrap()
            .iter()
            .zip(b.named_tensors().unwrap().iter())
        {
            assert!(ta.iter().zip(tb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = init_params(&cfg, 43).unwrap();
        assert_ne!(a.compress_w, c.compress_w);
        assert!(a.all_finite());
        for (_, _, t) in a.named_tensors().unwrap() {
            assert!(t.iter().all(|v| v.abs() <= 1.0));
        }
        // Layer-specific bound: conv weights live within ±1/√k.
        let bound = 1.0 / (cfg.kernel_size as f64).sqrt();
        assert!(a.blocks[0].conv_alpha.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        let n = 3;
        let x = rand_input(2, n * cfg.window_len * cfg.input_width);
        let (logits, lat) = forward(&params, &x, n).unwrap();
        assert_eq!(logits.len(), n * cfg.n_classes);
        assert_eq!(lat.len(), n * cfg.t_final().unwrap() * cfg.compressed_width);
        let (logits2, lat2) = forward(&params, &x, n).unwrap();
        assert!(logits.iter().zip(&logits2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(lat.iter().zip(&lat2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn forward_rejects_bad_input_sizes() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        let good = cfg.window_len * cfg.input_width;
        assert!(forward(&params, &vec![0.0; good - 1], 1).is_err());
        assert!(forward(&params, &vec![0.0; good], 0).is_err());
        assert!(forward(&params, &vec![0.0; good], 2).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 5).unwrap();
        let row_len = cfg.window_len * cfg.input_width;
        let batch = rand_input(6, 8 * row_len);
        let (big_logits, _) = forward(&params, &batch, 8).unwrap();
        for r in [0usize, 3, 7] {
            let (one, _) = forward(&params, &batch[r * row_len..(r + 1) * row_len], 1).unwrap();
            let big_row = &big_logits[r * cfg.n_classes..(r + 1) * cfg.n_classes];
            assert!(one.iter().zip(big_row).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn zero_params_zero_input_gives_half_latent() {
        let cfg = tiny_config();
        let params = zero_params(&cfg).unwrap();
        let x = vec![0.0; 2 * cfg.window_len * cfg.input_width];
        let lat = latent(&params, &x, 2).unwrap();
        assert!(lat.iter().all(|&v| v == 0.5), "latent must be exactly 0.5");
        // Head of zeros on a constant latent: all logits identical → the
        // tie rule must pick class 0.
        let (logits, _) = forward(&params, &x, 2).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert_eq!(predict_tenor(&params, &x[..cfg.window_len * cfg.input_width]).unwrap(), 0);
    }

    #[test]
    fn predict_follows_argmax_with_smaller_tie_index() {
        assert_eq!(argmax_class(&[0.0, 3.0, 1.0]), 1);
        assert_eq!(argmax_class(&[1.0, 0.5, 1.0]), 0);
        let v = vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0];
        assert_eq!(argmax_class(&v), 3);

        // Through the model: zero params, then bias one class up.
        let cfg = tiny_config();
        let mut params = zero_params(&cfg).unwrap();
        params.head2_b[3] = 1.0;
        let x = vec![0.2; cfg.window_len * cfg.input_width];
        assert_eq!(predict_tenor(&params, &x).unwrap(), 3);
        // Exact two-way tie → smaller class.
        params.head2_b[1] = 1.0;
        assert_eq!(predict_tenor(&params, &x).unwrap(), 1);

        // Softmax monotonicity: argmax of logits is argmax of probabilities.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let row: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            assert_eq!(argmax_class(&row), argmax_class(&probs));
        }
    }

    #[test]
    fn receptive_field_masks_match_schedule() {
        // Two blocks, k=2, d=[1,2]: latent[t'] reads inputs in
        // [t', t' + (k−1)·Σd] = [t', t'+3].
        let cfg = tiny_config();
        let params = init_params(&cfg, 11).unwrap();
        let (t, m_in) = (cfg.window_len, cfg.input_width);
        let t_f = cfg.t_final().unwrap();
        let m = cfg.compressed_width;
        let base_x = rand_input(12, t * m_in);
        let base = latent(&params, &base_x, 1).unwrap();
        let reach = (cfg.kernel_size - 1) * cfg.dilation_schedule.iter().sum::<usize>();
        for perturb_t in 0..t {
            let mut x = base_x.clone();
            for f in 0..m_in {
                x[perturb_t * m_in + f] += 0.37;
            }
            let lat = latent(&params, &x, 1).unwrap();
            let mut any_changed = false;
            for tp in 0..t_f {
                let changed = (0..m).any(|mm| {
                    base[tp * m + mm].to_bits() != lat[tp * m + mm].to_bits()
                });
                let in_window = tp <= perturb_t && perturb_t <= tp + reach;
                if changed {
                    assert!(
                        in_window,
                        "input t={perturb_t} leaked into latent t'={tp} outside its receptive field"
                    );
                    any_changed = true;
                }
            }
            // Any input inside some latent's receptive field must matter.
            if (0..t_f).any(|tp| tp <= perturb_t && perturb_t <= tp + reach) {
                assert!(any_changed, "input t={perturb_t} had no effect at all");
            }
        }
    }

    #[test]
    fn latent_is_equivariant_under_series_permutation() {
        // Swap the two compressed series by swapping compression output
        // columns (and bias) together with each block's per-series conv
        // kernel rows; attention projections are shared. The latent must
        // come out column-swapped, bit for bit (two-term reductions are
        // order-insensitive in IEEE arithmetic).
        let cfg = WattNetConfig {
            input_width: 3,
            compressed_width: 2,
            n_blocks: 2,
            kernel_size: 2,
            dilation_schedule: vec![1, 1],
            d_k: 3,
            head_hidden: 4,
            n_classes: 3,
            window_len: 9,
        };
        let params = init_params(&cfg, 21).unwrap();
        let x = rand_input(22, cfg.window_len * cfg.input_width);
        let base = latent(&params, &x, 1).unwrap();

        let mut swapped = params.clone();
        for row in swapped.compress_w.chunks_exact_mut(2) {
            row.swap(0, 1);
        }
        swapped.compress_b.swap(0, 1);
        for b in &mut swapped.blocks {
            let k = cfg.kernel_size;
            for t in [&mut b.conv_alpha, &mut b.conv_beta] {
                for i in 0..k {
                    t.swap(i, k + i);
                }
            }
        }
        let perm = latent(&swapped, &x, 1).unwrap();
        let t_f = cfg.t_final().unwrap();
        for tp in 0..t_f {
            assert_eq!(base[tp * 2].to_bits(), perm[tp * 2 + 1].to_bits());
            assert_eq!(base[tp * 2 + 1].to_bits(), perm[tp * 2].to_bits());
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = WattNetConfig {
            input_width: 4,
            compressed_width: 3,
            n_blocks: 2,
            kernel_size: 2,
            dilation_schedule: vec![1, 2],
            d_k: 2,
            head_hidden: 5,
            n_classes: 4,
            window_len: 10,
        };
        let params = init_params(&cfg, 31).unwrap();
        let n = 2;
        let x = rand_input(32, n * cfg.window_len * cfg.input_width);
        let labels = vec![1usize, 3];

        let mut flat: Vec<Vec<f64>> = vec![x.clone()];
        for (_, _, t) in params.named_tensors().unwrap() {
            flat.push(t.clone());
        }
        let template = params.clone();
        let report = grad_check(
            move |p| {
                let mut probe = template.clone();
                for (dst, src) in probe.tensors_mut().into_iter().zip(&p[1..]) {
                    dst.copy_from_slice(src);
                }
                let tape = Tape::new();
                let pass = forward_on_tape(&tape, &probe, &p[0], n)?;
                let loss = softmax_cross_entropy(&pass.logits, &labels)?;
                loss.backward()?;
                let mut grads = vec![pass.inputs.grad_or_zeros()];
                for leaf in &pass.param_leaves {
                    grads.push(leaf.grad_or_zeros());
                }
                Ok((loss.scalar()?, grads))
            },
            &flat,
            1e-5,
            33,
            120,
        )
        .unwrap();
        assert_eq!(report.checked, 120);
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        for ((_, _, a), (_, _, b)) in params
            .named_tensors()
            .unwrap()
            .iter()
            .zip(loaded.named_tensors().unwrap().iter())
        {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Loaded params drive bit-identical forward passes.
        let x = rand_input(78, cfg.window_len * cfg.input_width);
        let (l1, _) = forward(&params, &x, 1).unwrap();
        let (l2, _) = forward(&loaded, &x, 1).unwrap();
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn load_rejects_mismatched_layout() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        // Tamper: serialize with a config that disagrees with the tensors.
        let mut wrong = cfg.clone();
        wrong.head_hidden = 9;
        let meta = serde_json::json!({
            "model": "wattnet",
            "config": serde_json::to_value(&wrong).unwrap(),
        });
        let named = params.named_tensors().unwrap();
        let tensors: Vec<(&str, &[usize], &[f64])> = named
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
            .collect();
        write_checkpoint(&path, &meta, &tensors).unwrap();
        assert!(ModelParams::load(&path).is_err());
    }
}
