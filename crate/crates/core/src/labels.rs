//! Tenor label streams and the windowed training dataset.
//!
//! Three label sources share one class scheme: class `a ∈ {1..a_max}` means
//! "enter a contract fixing in `a` days", class 0 means "no trade".
//!
//! * [`optimal_labels`] — hindsight-optimal: the tenor with the largest
//!   realized gain, or 0 when nothing gains.
//! * [`expert_labels`] — what the market did: the tenor with the highest
//!   traded volume that day.
//! * [`oracle_labels`] — risk-averse hindsight: the shortest tenor with any
//!   positive gain.
//!
//! Ties always break toward the smallest tenor. [`window_dataset`] pairs
//! trailing feature windows with labels to form supervised samples; windows
//! are contiguous row slices of the panel, so building a dataset copies
//! nothing.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::ingest::{AlignedPanel, SpotSeries, VolumeCube};

/// The admissible tenor set: classes `{0, 1, .., a_max}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TenorSet {
    pub a_max: usize,
}

impl TenorSet {
    pub fn new(a_max: usize) -> Result<Self> {
        if a_max < 1 {
            return Err(Error::Config(format!("a_max must be >= 1, got {a_max}")));
        }
        Ok(TenorSet { a_max })
    }

    /// Number of classes including "no trade".
    pub fn n_classes(&self) -> usize {
        self.a_max + 1
    }
}

impl Default for TenorSet {
    fn default() -> Self {
        TenorSet { a_max: 90 }
    }
}

/// Which rule produced a label stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Optimal,
    Expert,
    Oracle,
}

impl LabelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelKind::Optimal => "optimal",
            LabelKind::Expert => "expert",
            LabelKind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(LabelKind::Optimal),
            "expert" => Ok(LabelKind::Expert),
            "oracle" => Ok(LabelKind::Oracle),
            other => Err(Error::Validation(format!("unknown label kind {other:?}"))),
        }
    }
}

/// Dated class labels from one rule.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSeries {
    pub kind: LabelKind,
    pub dates: Vec<NaiveDate>,
    pub labels: Vec<usize>,
}

impl LabelSeries {
    /// Label for a date, if that date is labeled.
    pub fn label_on(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok().map(|i| self.labels[i])
    }

    /// How many days carry a given class (e.g. class 0 = no-trade days).
    pub fn count_class(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Hindsight-optimal labels: ā_t = argmax_{a∈1..a_max} (y_{t+a} − y_t),
/// ties toward the smallest tenor, class 0 when no tenor gains. The last
/// `a_max` days have no defined label and are omitted.
pub fn optimal_labels(y: &SpotSeries, tenors: TenorSet) -> Result<LabelSeries> {
    y.validate()?;
    let a_max = tenors.a_max;
    if y.rates.len() <= a_max {
        return Err(Error::Validation(format!(
            "{}: need more than a_max = {a_max} observations, got {}",
            y.pair,
            y.rates.len()
        )));
    }
    let n = y.rates.len() - a_max;
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        let mut best_a = 0usize;
        let mut best_gain = 0.0f64;
        for a in 1..=a_max {
            let gain = y.rates[t + a] - y.rates[t];
            if gain > best_gain {
                best_gain = gain;
                best_a = a;
            }
        }
        labels.push(best_a);
    }
    Ok(LabelSeries {
        kind: LabelKind::Optimal,
        dates: y.dates[..n].to_vec(),
        labels,
    })
}

/// Market-expert labels: the tenor carrying the most volume each day, ties
/// toward the smallest tenor; days with no volume at all get class 0.
pub fn expert_labels(cube: &VolumeCube) -> Result<LabelSeries> {
    let mut labels = Vec::with_capacity(cube.dates.len());
    for t in 0..cube.dates.len() {
        let row = cube.row(t);
        let mut best_a = 0usize;
        let mut best_v = 0.0f64;
        for (i, &v) in row.iter().enumerate() {
            if v < 0.0 {
                return Err(Error::Validation(format!(
                    "{}: negative volume at day {t}, tenor {}",
                    cube.pair,
                    i + 1
                )));
            }
            if v > best_v {
                best_v = v;
                best_a = i + 1;
            }
        }
        labels.push(best_a);
    }
    Ok(LabelSeries {
        kind: LabelKind::Expert,
        dates: cube.dates.clone(),
        labels,
    })
}

/// First-profit oracle labels: the shortest tenor with a positive gain,
/// class 0 when none exists. The last `a_max` days are omitted.
pub fn oracle_labels(y: &SpotSeries, tenors: TenorSet) -> Result<LabelSeries> {
    y.validate()?;
    let a_max = tenors.a_max;
    if y.rates.len() <= a_max {
        return Err(Error::Validation(format!(
            "{}: need more than a_max = {a_max} observations, got {}",
            y.pair,
            y.rates.len()
        )));
    }
    let n = y.rates.len() - a_max;
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        let mut chosen = 0usize;
        for a in 1..=a_max {
            if y.rates[t + a] - y.rates[t] > 0.0 {
                chosen = a;
                break;
            }
        }
        labels.push(chosen);
    }
    Ok(LabelSeries {
        kind: LabelKind::Oracle,
        dates: y.dates[..n].to_vec(),
        labels,
    })
}

/// One supervised sample: the panel window ending at `date` plus its label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    /// Panel row index of the window's final (= label) day.
    pub end_row: usize,
    pub label: usize,
    pub date: NaiveDate,
}

/// Trailing windows over the panel paired with labels. Holds the panel by
/// shared pointer; windows are borrowed row slices, never copies.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    panel: Arc<AlignedPanel>,
    pub t_len: usize,
    pub samples: Vec<Sample>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature count per day.
    pub fn n_features(&self) -> usize {
        self.panel.n_cols()
    }

    /// The `t_len × n_features` window for sample `i`, row-major, oldest
    /// day first, ending at the sample's label date.
    pub fn window(&self, i: usize) -> &[f64] {
        let s = &self.samples[i];
        self.panel.rows(s.end_row + 1 - self.t_len, s.end_row + 1)
    }

    /// The shared panel backing the windows.
    pub fn panel(&self) -> &Arc<AlignedPanel> {
        &self.panel
    }

    /// Dataset restricted to the given sample indices (shared panel, order
    /// preserved).
    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> WindowedDataset {
        WindowedDataset {
            panel: Arc::clone(&self.panel),
            t_len: self.t_len,
            samples: indices.into_iter().map(|i| self.samples[i]).collect(),
        }
    }

    /// Split by label date: samples strictly before `date` vs. the rest.
    pub fn split_at(&self, date: NaiveDate) -> (WindowedDataset, WindowedDataset) {
        let (before, after): (Vec<Sample>, Vec<Sample>) =
            self.samples.iter().partition(|s| s.date < date);
        (
            WindowedDataset {
                panel: Arc::clone(&self.panel),
                t_len: self.t_len,
                samples: before,
            },
            WindowedDataset {
                panel: Arc::clone(&self.panel),
                t_len: self.t_len,
                samples: after,
            },
        )
    }
}

/// Pair each labeled date with the `t_len`-day panel window ending on it.
/// Labeled dates missing from the panel, or without `t_len` days of panel
/// history, are skipped; producing no samples at all is an error.
pub fn window_dataset(
    panel: Arc<AlignedPanel>,
    labels: &LabelSeries,
    t_len: usize,
) -> Result<WindowedDataset> {
    if t_len < 1 {
        return Err(Error::Config(format!("t_len must be >= 1, got {t_len}")));
    }
    if panel.n_rows() < t_len {
        return Err(Error::Validation(format!(
            "panel has {} rows, shorter than the window length {t_len}",
            panel.n_rows()
        )));
    }
    let mut samples = Vec::new();
    for (date, &label) in labels.dates.iter().zip(&labels.labels) {
        let Some(row) = panel.row_of(*date) else {
            continue;
        };
        if row + 1 < t_len {
            continue;
        }
        samples.push(Sample {
            end_row: row,
            label,
            date: *date,
        });
    }
    if samples.is_empty() {
        return Err(Error::Validation(
            "no eligible samples: labeled range and panel history do not overlap".into(),
        ));
    }
    Ok(WindowedDataset {
        panel,
        t_len,
        samples,
    })
}

/// Write labels as CSV (`date,label,kind`).
pub fn write_labels_csv(path: impl AsRef<Path>, series: &LabelSeries) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("date,label,kind\n");
    for (d, l) in series.dates.iter().zip(&series.labels) {
        let _ = writeln!(text, "{d},{l},{}", series.kind.as_str());
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read labels written by [`write_labels_csv`]. All rows must agree on the
/// kind; dates must be strictly increasing.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<LabelSeries> {
    let path = path.as_ref();
    let loc = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(loc.clone(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "date,label,kind")) => {}
        _ => {
            return Err(Error::Parse {
                path: loc,
                line: 1,
                msg: "label header must be date,label,kind".into(),
            })
        }
    }
    let mut kind: Option<LabelKind> = None;
    let mut dates = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut cols = raw.split(',');
        let (Some(d), Some(l), Some(k), None) = (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(Error::Parse {
                path: loc,
                line,
                msg: "expected exactly 3 columns".into(),
            });
        };
        let date = NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d").map_err(|_| Error::Parse {
            path: loc.clone(),
            line,
            msg: format!("bad date {d:?}"),
        })?;
        let label: usize = l.trim().parse().map_err(|_| Error::Parse {
            path: loc.clone(),
            line,
            msg: format!("bad label {l:?}"),
        })?;
        let k = LabelKind::parse(k.trim())?;
        match kind {
            None => kind = Some(k),
            Some(prev) if prev == k => {}
            Some(prev) => {
                return Err(Error::Validation(format!(
                    "{loc}:{line}: mixed label kinds {} and {}",
                    prev.as_str(),
                    k.as_str()
                )))
            }
        }
        if let Some(&last) = dates.last() {
            if date <= last {
                return Err(Error::Validation(format!(
                    "{loc}:{line}: dates must be strictly increasing"
                )));
            }
        }
        dates.push(date);
        labels.push(label);
    }
    let Some(kind) = kind else {
        return Err(Error::Validation(format!("{loc}: no label rows")));
    };
    Ok(LabelSeries {
        kind,
        dates,
        labels,
    })
}
