//! Tenor selection for non-deliverable forwards.
//!
//! An NDF desk that wants exposure to a currency has one real decision to
//! make every day: not *whether* to enter a contract but *how long* it
//! should run. This crate implements the full pipeline for learning that
//! decision from data:
//!
//! * [`ingest`] — parse spot fixings and NDF trade records, aggregate
//!   traded volume into per-tenor daily cubes, and align everything onto a
//!   single normalized feature panel.
//! * [`indicators`] — classic technical indicators (SMA/EMA/MACD/Bollinger)
//!   plus a small autoregressive forecaster, used as extra feature columns.
//! * [`labels`] — hindsight-optimal, market-expert and first-profit oracle
//!   tenor labels, and the sliding-window dataset built from them.
//! * [`autodiff`] — a small reverse-mode automatic differentiation engine
//!   with exactly the tensor operations the model needs, plus a finite
//!   difference gradient checker and a binary checkpoint format.
//! * [`wattnet`] — the spatio-temporal network itself: per-series dilated
//!   gated temporal convolutions interleaved with cross-series attention.
//! * [`training`] — Adam with cosine learning-rate decay, minibatch
//!   shuffling, early stopping, and divergence detection.
//! * [`backtest`] — ROI-based evaluation against momentum baselines.
//! * [`explain`] — gradient-based feature attribution and latent export.
//! * [`synth`] — a deterministic synthetic market generator so the whole
//!   pipeline can be exercised end to end without proprietary data.
//!
//! Everything is seeded and deterministic: two runs with the same inputs,
//! configuration and seed produce byte-identical artifacts.

pub mod autodiff;
pub mod backtest;
pub mod error;
pub mod explain;
pub mod indicators;
pub mod ingest;
pub mod labels;
pub mod synth;
pub mod training;
pub mod wattnet;

pub use autodiff::{grad_check, GradCheckReport, Tape, Tensor};
pub use backtest::{run_backtest, BacktestReport, PolicyTrace};
pub use error::{Error, ErrorCategory, Result};
pub use explain::{input_gradients, GradReport};
pub use ingest::{AlignedPanel, NdfRecord, SpotSeries, VolumeCube};
pub use labels::{LabelKind, LabelSeries, TenorSet, WindowedDataset};
pub use synth::SynthConfig;
pub use training::{train, TrainConfig, TrainReport};
pub use wattnet::{ModelParams, WattNetConfig};
