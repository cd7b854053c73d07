//! Policy evaluation on a held-out test period: percent ROI per trade, the
//! three report metrics (total ROI, optimal accuracy, non-negative-return
//! accuracy), and the two classical momentum baselines.
//!
//! Conventions, applied uniformly: class 0 means "no trade" and realizes
//! exactly 0 ROI without counting as a trade; per-trade ROI is summed, not
//! compounded; a day whose future rates (or optimal label) fall past the
//! end of the data is excluded from every metric and counted in the
//! report; overlapping open trades are allowed — one fresh decision per
//! day, no netting.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AlignedPanel, SpotSeries};
use crate::labels::{optimal_labels, oracle_labels, LabelSeries, TenorSet};

/// Percent return of a tenor-`a` trade opened at rate `x_t` and fixed at
/// `x_ta`: `100·(x_ta − x_t)/x_t`; the no-trade class (a = 0) returns
/// exactly 0.
pub fn roi(x_t: f64, x_ta: f64, a: usize) -> Result<f64> {
    if !(x_t > 0.0) {
        return Err(Error::Validation(format!(
            "spot rate must be positive to price a trade, got {x_t}"
        )));
    }
    if a == 0 {
        return Ok(0.0);
    }
    if !x_ta.is_finite() {
        return Err(Error::Validation(format!("fix-date rate {x_ta} is not usable")));
    }
    Ok(100.0 * (x_ta - x_t) / x_t)
}

/// Percent of predictions exactly equal to the optimal label.
pub fn optimal_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("no days to score".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Percent of predictions whose realized return is ≥ 0, with `predictions[i]`
/// acting at spot index `start + i`. Class 0 realizes 0 and is always
/// correct; any trade whose fix date falls past the end of the series is an
/// error (the caller is responsible for excluding such days).
pub fn nonneg_accuracy(
    predictions: &[usize],
    spot: &SpotSeries,
    start: usize,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Validation("no days to score".into()));
    }
    let mut hits = 0usize;
    for (i, &a) in predictions.iter().enumerate() {
        let t = start + i;
        if t >= spot.rates.len() {
            return Err(Error::Validation(format!(
                "prediction {i} falls outside the spot series"
            )));
        }
        let r = if a == 0 {
            0.0
        } else {
            let fix = t + a;
            if fix >= spot.rates.len() {
                return Err(Error::Validation(format!(
                    "trade at index {t} with tenor {a} has no realized rate"
                )));
            }
            roi(spot.rates[t], spot.rates[fix], a)?
        };
        if r >= 0.0 {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// A named sequence of per-date tenor decisions. Baselines produce these;
/// [`run_backtest`] consumes any decision source through a closure.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrace {
    pub source: String,
    pub dates: Vec<NaiveDate>,
    pub classes: Vec<usize>,
    /// Days where required history was missing and class 0 was substituted.
    pub fallback_days: usize,
}

impl PolicyTrace {
    /// Class chosen on `date`, if the trace covers it.
    pub fn class_on(&self, date: NaiveDate) -> Option<usize> {
        let i = self.dates.binary_search(&date).ok()?;
        Some(self.classes[i])
    }

    /// Adapt the trace into a [`run_backtest`] policy; days outside the
    /// trace are an error.
    pub fn policy(&self) -> impl FnMut(NaiveDate) -> Result<usize> + '_ {
        move |date| {
            self.class_on(date).ok_or_else(|| {
                Error::Validation(format!("{}: no decision recorded for {date}", self.source))
            })
        }
    }
}

/// Adapt a label series (optimal / expert / oracle) into a policy.
pub fn label_policy(series: &LabelSeries) -> impl FnMut(NaiveDate) -> Result<usize> + '_ {
    move |date| {
        series.label_on(date).ok_or_else(|| {
            Error::Validation(format!(
                "{} labels: no label for {date}",
                series.kind.as_str()
            ))
        })
    }
}

/// Momentum-1 baseline: repeat yesterday's expert action; the first day has
/// no yesterday and stays flat (class 0).
pub fn momentum1(expert: &LabelSeries) -> Result<PolicyTrace> {
    if expert.dates.len() < 2 {
        return Err(Error::Validation(format!(
            "momentum-1 needs at least 2 expert days, got {}",
            expert.dates.len()
        )));
    }
    let mut classes = Vec::with_capacity(expert.labels.len());
    classes.push(0);
    classes.extend_from_slice(&expert.labels[..expert.labels.len() - 1]);
    Ok(PolicyTrace {
        source: "momentum1".into(),
        dates: expert.dates.clone(),
        classes,
        fallback_days: 1,
    })
}

/// Momentum-90-style baseline: replay the realized-optimal tenor from
/// `a_max` trading days earlier — the most recent day whose full outcome
/// horizon is observable today. With the paper's 90-day tenor grid the
/// lookback is exactly 90 days. Days with insufficient history act as
/// class 0 and are counted in `fallback_days`.
pub fn momentum90(spot: &SpotSeries, tenors: TenorSet) -> Result<PolicyTrace> {
    let lag = tenors.a_max;
    let optimal = optimal_labels(spot, tenors)?;
    let n = spot.dates.len();
    let mut classes = vec![0usize; n];
    let mut fallback_days = 0usize;
    for t in 0..n {
        if t >= lag {
            // optimal label at t − lag uses data through t: observable.
            classes[t] = optimal.labels[t - lag];
        } else {
            fallback_days += 1;
        }
    }
    Ok(PolicyTrace {
        source: "momentum90".into(),
        dates: spot.dates.clone(),
        classes,
        fallback_days,
    })
}

/// One evaluated test day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub date: NaiveDate,
    pub class: usize,
    /// Realized percent ROI (0 for class 0).
    pub roi: f64,
    pub optimal_label: usize,
    pub nn_correct: bool,
}

/// Metrics over the evaluated test days plus the per-date table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub source: String,
    pub split_date: NaiveDate,
    /// Days scored into the metrics.
    pub days: usize,
    /// Test days dropped because their outcome horizon runs past the end
    /// of the data.
    pub excluded_end_days: usize,
    /// Test days dropped because the policy lacked window history.
    pub excluded_history_days: usize,
    /// Count of class > 0 decisions among evaluated days.
    pub trade_count: usize,
    /// Sum of per-trade percent ROI.
    pub total_roi: f64,
    pub optimal_acc: f64,
    pub nonneg_acc: f64,
    pub table: Vec<TraceRow>,
}

impl BacktestReport {
    /// Re-derive every aggregate from the table; errors on any mismatch.
    /// Guards report writers against drift between table and summary.
    pub fn audit(&self) -> Result<()> {
        if self.table.len() != self.days {
            return Err(Error::Validation(format!(
                "report says {} days but the table has {} rows",
                self.days,
                self.table.len()
            )));
        }
        let sum: f64 = self.table.iter().map(|r| r.roi).sum();
        let trades = self.table.iter().filter(|r| r.class > 0).count();
        let opt = 100.0 * self.table.iter().filter(|r| r.class == r.optimal_label).count() as f64
            / self.days.max(1) as f64;
        let nn = 100.0 * self.table.iter().filter(|r| r.nn_correct).count() as f64
            / self.days.max(1) as f64;
        if sum.to_bits() != self.total_roi.to_bits()
            || trades != self.trade_count
            || opt.to_bits() != self.optimal_acc.to_bits()
            || nn.to_bits() != self.nonneg_acc.to_bits()
        {
            return Err(Error::Validation(
                "report totals disagree with the per-date table".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluate a policy over every test day: panel dates on/after
/// `split_date` where (a) at least `min_history` panel rows end on the day,
/// and (b) the day's optimal label and all candidate fix dates lie inside
/// the spot series. The policy is consulted once per evaluated day, in date
/// order; any policy failure aborts with the day stamped.
pub fn run_backtest(
    source: &str,
    mut policy: impl FnMut(NaiveDate) -> Result<usize>,
    panel: &AlignedPanel,
    spot: &SpotSeries,
    tenors: TenorSet,
    split_date: NaiveDate,
    min_history: usize,
) -> Result<BacktestReport> {
    if min_history < 1 {
        return Err(Error::Config("min_history must be >= 1".into()));
    }
    let optimal = optimal_labels(spot, tenors)?;
    let mut table = Vec::new();
    let mut excluded_end_days = 0usize;
    let mut excluded_history_days = 0usize;
    for (row, &date) in panel.dates.iter().enumerate() {
        if date < split_date {
            continue;
        }
        if row + 1 < min_history {
            excluded_history_days += 1;
            continue;
        }
        let Some(opt_label) = optimal.label_on(date) else {
            // Inside the last a_max days: outcomes not fully observable.
            excluded_end_days += 1;
            continue;
        };
        let t = spot.index_of(date).ok_or_else(|| {
            Error::Validation(format!("panel date {date} is missing from the spot series"))
        })?;
        let class = policy(date).map_err(|e| {
            Error::Compute(format!("policy {source} failed on {date}: {e}"))
        })?;
        if class >= tenors.n_classes() {
            return Err(Error::Compute(format!(
                "policy {source} chose class {class} on {date}, beyond a_max {}",
                tenors.a_max
            )));
        }
        let r = if class == 0 {
            0.0
        } else {
            roi(spot.rates[t], spot.rates[t + class], class)?
        };
        table.push(TraceRow {
            date,
            class,
            roi: r,
            optimal_label: opt_label,
            nn_correct: r >= 0.0,
        });
    }
    if table.is_empty() {
        return Err(Error::Validation(format!(
            "no evaluable test days on/after {split_date}"
        )));
    }
    let days = table.len();
    let report = BacktestReport {
        source: source.to_string(),
        split_date,
        days,
        excluded_end_days,
        excluded_history_days,
        trade_count: table.iter().filter(|r| r.class > 0).count(),
        total_roi: table.iter().map(|r| r.roi).sum(),
        optimal_acc: 100.0 * table.iter().filter(|r| r.class == r.optimal_label).count() as f64
            / days as f64,
        nonneg_acc: 100.0 * table.iter().filter(|r| r.nn_correct).count() as f64 / days as f64,
        table,
    };
    report.audit()?;
    Ok(report)
}

/// Convenience: run the oracle-label policy (shortest positive tenor) over
/// the test period.
pub fn run_oracle_backtest(
    panel: &AlignedPanel,
    spot: &SpotSeries,
    tenors: TenorSet,
    split_date: NaiveDate,
) -> Result<BacktestReport> {
    let oracle = oracle_labels(spot, tenors)?;
    run_backtest(
        "oracle",
        label_policy(&oracle),
        panel,
        spot,
        tenors,
        split_date,
        1,
    )
}

/// Write the per-date table as `date,class,roi,optimal_label,nn_correct`.
/// ROI prints with 17 significant digits so the file round-trips the f64
/// exactly.
pub fn write_report_csv(path: impl AsRef<Path>, report: &BacktestReport) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("date,class,roi,optimal_label,nn_correct\n");
    for r in &report.table {
        out.push_str(&format!(
            "{},{},{:.16e},{},{}\n",
            r.date, r.class, r.roi, r.optimal_label, r.nn_correct
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
