//! Run configuration: one TOML file describing every pipeline stage.
//!
//! Precedence is command-line flag > config file > built-in default. The
//! built-in defaults form the desk-scale profile (small model, synthetic
//! market) so the full pipeline runs out of the box with no config file
//! at all; `profiles/paper.toml` mirrors the published model dimensions.

use std::path::{Component, Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tenorsel::error::{Error, Result};
use tenorsel::labels::LabelKind;
use tenorsel::synth::SynthConfig;
use tenorsel::training::TrainConfig;
use tenorsel::wattnet::WattNetConfig;

/// Artifact file names, all relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub spot_csv: String,
    pub ndf_csv: String,
    pub aligned_spot_csv: String,
    pub panel_csv: String,
    pub panel_meta: String,
    pub labels_optimal: String,
    pub labels_expert: String,
    pub labels_oracle: String,
    pub checkpoint: String,
    pub train_report: String,
    /// Backtest artifacts become `<backtest_prefix>_<policy>.{csv,json}`.
    pub backtest_prefix: String,
    pub grad_report: String,
    pub latents_csv: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            spot_csv: "spots.csv".into(),
            ndf_csv: "ndf_records.csv".into(),
            aligned_spot_csv: "aligned_spots.csv".into(),
            panel_csv: "panel.csv".into(),
            panel_meta: "panel_meta.json".into(),
            labels_optimal: "labels_optimal.csv".into(),
            labels_expert: "labels_expert.csv".into(),
            labels_oracle: "labels_oracle.csv".into(),
            checkpoint: "model.ckpt".into(),
            train_report: "train_report.json".into(),
            backtest_prefix: "backtest".into(),
            grad_report: "grad_report.json".into(),
            latents_csv: "latents.csv".into(),
        }
    }
}

/// What is traded and how the timeline is partitioned. Three eras:
/// data before `train_start` only ever feeds the AR forecaster fit (and
/// indicator warm-up), `[train_start, split_date)` is the training period,
/// and days from `split_date` on are the held-out test period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketConfig {
    /// The pair whose tenor is selected.
    pub pair: String,
    /// Pairs with NDF volume (each gets a volume cube and an AR column).
    pub ndf_pairs: Vec<String>,
    /// First day of the training period; the AR forecaster fits strictly
    /// before it so its coefficients leak nothing into training.
    pub train_start: NaiveDate,
    /// First test day. Training and early stopping only ever see data
    /// strictly before this date.
    pub split_date: NaiveDate,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            pair: "USDBRL".into(),
            ndf_pairs: vec!["USDBRL".into(), "USDCNY".into()],
            train_start: NaiveDate::from_ymd_opt(2015, 7, 1).unwrap(),
            split_date: NaiveDate::from_ymd_opt(2016, 9, 1).unwrap(),
        }
    }
}

/// Input window geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub t_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { t_len: 30 }
    }
}

/// Admissible tenor set 1..=a_max (class 0 is "no trade").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TenorConfig {
    pub a_max: usize,
}

impl Default for TenorConfig {
    fn default() -> Self {
        TenorConfig { a_max: 90 }
    }
}

/// Feature-construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Longest spot gap (calendar days) forward-filled during alignment.
    pub max_fill_days: i64,
    /// Rolling z-score window.
    pub normalize_window: usize,
    /// Autoregression order for the AR forecast columns.
    pub ar_order: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            max_fill_days: 5,
            normalize_window: 30,
            ar_order: 10,
        }
    }
}

/// Which label stream supervises training (and sample selection for
/// explain/export).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// "optimal", "expert", or "oracle".
    pub label_kind: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            label_kind: "expert".into(),
        }
    }
}

/// Attribution report parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Features listed in the report's top-k section.
    pub top_k: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { top_k: 6 }
    }
}

/// The whole run: every stage reads exactly the section it needs, so one
/// file is a complete, reproducible experiment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub market: MarketConfig,
    pub window: WindowConfig,
    pub tenor: TenorConfig,
    pub features: FeatureConfig,
    pub dataset: DatasetConfig,
    pub model: WattNetConfig,
    pub training: TrainConfig,
    pub synth: SynthConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    /// The desk-scale profile: the default synthetic market's panel is 255
    /// columns wide (8 spots + 64 indicators + 3 AR forecasts + 2×90
    /// volume columns) and the model is shrunk to two blocks. A bare
    /// `WattNetConfig::default()` keeps the published paper-scale
    /// dimensions instead (see `profiles/paper.toml`).
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            market: MarketConfig::default(),
            window: WindowConfig::default(),
            tenor: TenorConfig::default(),
            features: FeatureConfig::default(),
            dataset: DatasetConfig::default(),
            model: WattNetConfig {
                input_width: 255,
                n_blocks: 2,
                dilation_schedule: vec![1, 2],
                ..WattNetConfig::default()
            },
            training: TrainConfig::default(),
            synth: SynthConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read a TOML file over the defaults. Unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Cross-section consistency; every command runs this before touching
    /// any data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.synth.validate()?;
        if self.window.t_len != self.model.window_len {
            return Err(Error::Config(format!(
                "window.t_len = {} but model.window_len = {}; they describe the same window",
                self.window.t_len, self.model.window_len
            )));
        }
        if self.tenor.a_max + 1 != self.model.n_classes {
            return Err(Error::Config(format!(
                "tenor.a_max = {} needs model.n_classes = {} (a_max + 1 including no-trade), got {}",
                self.tenor.a_max,
                self.tenor.a_max + 1,
                self.model.n_classes
            )));
        }
        if self.market.ndf_pairs.is_empty() {
            return Err(Error::Config("market.ndf_pairs must not be empty".into()));
        }
        let mut seen = self.market.ndf_pairs.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.market.ndf_pairs.len() {
            return Err(Error::Config("market.ndf_pairs contains duplicates".into()));
        }
        if !self.market.ndf_pairs.contains(&self.market.pair) {
            return Err(Error::Config(format!(
                "target pair {} must be one of market.ndf_pairs (it needs a volume cube)",
                self.market.pair
            )));
        }
        if self.market.train_start >= self.market.split_date {
            return Err(Error::Config(format!(
                "market.train_start {} must precede market.split_date {}",
                self.market.train_start, self.market.split_date
            )));
        }
        if self.features.max_fill_days < 0 {
            return Err(Error::Config("features.max_fill_days must be >= 0".into()));
        }
        if self.features.normalize_window < 2 {
            return Err(Error::Config("features.normalize_window must be >= 2".into()));
        }
        if self.features.ar_order < 1 {
            return Err(Error::Config("features.ar_order must be >= 1".into()));
        }
        if self.explain.top_k < 1 {
            return Err(Error::Config("explain.top_k must be >= 1".into()));
        }
        LabelKind::parse(&self.dataset.label_kind)?;
        Ok(())
    }

    /// The supervising label kind (validated).
    pub fn label_kind(&self) -> Result<LabelKind> {
        LabelKind::parse(&self.dataset.label_kind)
    }

    /// Label file for a kind.
    pub fn labels_file(&self, kind: LabelKind) -> &str {
        match kind {
            LabelKind::Optimal => &self.paths.labels_optimal,
            LabelKind::Expert => &self.paths.labels_expert,
            LabelKind::Oracle => &self.paths.labels_oracle,
        }
    }

    /// Volume-cube file name for one pair (a fixed convention rather than
    /// a config key, so the set of files tracks `market.ndf_pairs`).
    pub fn volumes_file(&self, pair: &str) -> String {
        format!("volumes_{pair}.csv")
    }

    /// SHA-256 of the canonical JSON encoding of the effective config;
    /// recorded in every manifest.
    pub fn sha256(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)
            .map_err(|e| Error::Validation(format!("config serialization: {e}")))?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

/// Resolve a configured artifact name inside the output directory.
/// Absolute paths and `..` components are rejected so commands can never
/// write outside the directory the user pointed them at.
pub fn artifact_path(out_dir: &Path, name: &str) -> Result<PathBuf> {
    let p = Path::new(name);
    if p.is_absolute() {
        return Err(Error::Config(format!(
            "artifact path {name} is absolute; configure a name relative to --out-dir"
        )));
    }
    for c in p.components() {
        if matches!(c, Component::ParentDir) {
            return Err(Error::Config(format!(
                "artifact path {name} escapes the output directory"
            )));
        }
    }
    Ok(out_dir.join(p))
}
