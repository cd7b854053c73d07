//! Gradient-based feature attribution, correlation context, and latent
//! export for external embedding tools.
//!
//! Feature importance for feature `j` of one window is
//! `𝒢_j = (1/T)·|Σ_t ∂ℒ/∂x_{jt}|` — the gradient of the cross-entropy
//! loss at the target class, summed over the window's time axis, absolute
//! value, divided by the window length — then averaged over samples.
//! Taking the absolute value per sample before averaging prevents
//! cross-sample cancellation. Features with no forward path to the logits
//! receive exactly 0, not a rounded value: the autodiff engine leaves dead
//! paths untouched.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_cross_entropy, Tape};
use crate::error::{Error, Result};
use crate::indicators::{rolling_std, IndicatorSeries};
use crate::wattnet::{argmax_class, forward_on_tape, ModelParams};

/// Per-feature gradient importances for one target class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// The tenor class the loss was evaluated against.
    pub target_class: usize,
    /// Windows averaged over.
    pub n_samples: usize,
    /// 𝒢_j per input feature; nonnegative.
    pub importance: Vec<f64>,
    /// Feature indices sorted by importance, largest first; ties keep the
    /// smaller index first.
    pub ranking: Vec<usize>,
}

impl GradReport {
    /// The `k` most important features as (index, 𝒢) pairs.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        self.ranking
            .iter()
            .take(k)
            .map(|&j| (j, self.importance[j]))
            .collect()
    }
}

/// Descending argsort, ties toward the smaller index.
fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Gradient importance of every input feature for predicting
/// `target_class`, averaged over the given windows (each a flat T×M_in
/// row-major slice).
pub fn input_gradients(
    params: &ModelParams,
    windows: &[&[f64]],
    target_class: usize,
) -> Result<GradReport> {
    if windows.is_empty() {
        return Err(Error::Validation(
            "input_gradients needs at least one window".into(),
        ));
    }
    let cfg = &params.config;
    if target_class >= cfg.n_classes {
        return Err(Error::Validation(format!(
            "target class {target_class} outside {} classes",
            cfg.n_classes
        )));
    }
    let (t_len, m_in) = (cfg.window_len, cfg.input_width);
    let mut importance = vec![0.0f64; m_in];
    for (wi, window) in windows.iter().enumerate() {
        if window.len() != t_len * m_in {
            return Err(Error::Shape(format!(
                "window {wi} has {} values, expected {t_len}×{m_in}",
                window.len()
            )));
        }
        let tape = Tape::new();
        let pass = forward_on_tape(&tape, params, window, 1)?;
        let loss = softmax_cross_entropy(&pass.logits, &[target_class])?;
        loss.backward()?;
        match pass.inputs.grad() {
            Some(g) => {
                for j in 0..m_in {
                    let mut sum_t = 0.0;
                    for t in 0..t_len {
                        sum_t += g[t * m_in + j];
                    }
                    importance[j] += sum_t.abs() / t_len as f64;
                }
            }
            // The whole input is disconnected (e.g. all-zero weights):
            // every feature keeps its exact zero.
            None => {}
        }
    }
    let n = windows.len() as f64;
    for v in &mut importance {
        *v /= n;
    }
    let ranking = rank_descending(&importance);
    Ok(GradReport {
        target_class,
        n_samples: windows.len(),
        importance,
        ranking,
    })
}

/// Pearson product-moment correlation of two equal-length series.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Validation("correlation needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        cov += da * db;
        vx += da * da;
        vy += db * db;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Validation(
            "correlation undefined for a zero-variance series".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Rolling volatility context for attribution reports: the trailing
/// `window`-day standard deviation of a series (delegates to the
/// indicators module; 20 days matches the volatility overlays used with
/// importance rankings).
pub fn volatility_context(x: &[f64], window: usize) -> Result<IndicatorSeries> {
    rolling_std(x, window)
}

/// One exported latent row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub date: NaiveDate,
    pub pred: usize,
    pub label: usize,
    pub latent: Vec<f64>,
}

/// Write one CSV row per sample: `sample_date,pred,label,z_0,…,z_{D−1}`
/// where D = T_final·M. Values print with 17 significant digits so parsing
/// them back yields bit-identical f64s. Returns the rows written.
pub fn export_latents(
    params: &ModelParams,
    windows: &[&[f64]],
    dates: &[NaiveDate],
    labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<Vec<LatentRow>> {
    if windows.is_empty() {
        return Err(Error::Validation("no samples to export".into()));
    }
    if windows.len() != dates.len() || windows.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} windows, {} dates, {} labels — counts must match",
            windows.len(),
            dates.len(),
            labels.len()
        )));
    }
    let cfg = &params.config;
    let dim = cfg.t_final()? * cfg.compressed_width;
    let mut header = String::from("sample_date,pred,label");
    for j in 0..dim {
        header.push_str(&format!(",z_{j}"));
    }
    header.push('\n');
    let mut out = header;
    let mut rows = Vec::with_capacity(windows.len());
    for ((window, &date), &label) in windows.iter().zip(dates).zip(labels) {
        let tape = Tape::new();
        let pass = forward_on_tape(&tape, params, window, 1)?;
        let latent = pass.latent.value();
        let pred = argmax_class(&pass.logits.value());
        out.push_str(&format!("{date},{pred},{label}"));
        for v in &latent {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
        rows.push(LatentRow {
            date,
            pred,
            label,
            latent,
        });
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(rows)
}

/// Parse a latent CSV written by [`export_latents`].
pub fn read_latents(path: impl AsRef<Path>) -> Result<Vec<LatentRow>> {
    let path = path.as_ref();
    let loc = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(loc.clone(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: loc.clone(),
        line: 1,
        msg: "empty latent file".into(),
    })?;
    if !header.starts_with("sample_date,pred,label") {
        return Err(Error::Parse {
            path: loc.clone(),
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let mut fields = line.split(',');
        let parse_err = |msg: String| Error::Parse {
            path: loc.clone(),
            line: line_no,
            msg,
        };
        let date: NaiveDate = fields
            .next()
            .ok_or_else(|| parse_err("missing date".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad date: {e}")))?;
        let pred: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing pred".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad pred: {e}")))?;
        let label: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing label".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad label: {e}")))?;
        let latent: Vec<f64> = fields
            .map(|f| f.parse().map_err(|e| parse_err(format!("bad value: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(LatentRow {
            date,
            pred,
            label,
            latent,
        });
    }
    Ok(rows)
}
