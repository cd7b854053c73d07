//! Data ingestion: spot rates, NDF records, volume cubes, and the aligned
//! feature panel.
//!
//! The pipeline runs in a fixed order:
//!
//! 1. [`parse_spot_csv`] / [`parse_ndf_records`] read the raw files.
//! 2. [`align_spots`] puts every spot series on one trading calendar,
//!    forward-filling short gaps.
//! 3. [`crate::indicators::build_indicator_panel`] derives indicator columns
//!    from the aligned series.
//! 4. [`aggregate_volumes`] turns NDF records into a per-tenor daily volume
//!    cube on the same calendar.
//! 5. [`align_panel`] merges spots, indicators and volumes into one matrix,
//!    dropping indicator warm-up rows.
//! 6. [`rolling_normalize`] z-scores every column against a trailing window.
//!
//! All functions are pure and deterministic: column order is alphabetical
//! within each group, aggregation sums in a canonical order, and floats are
//! serialized with shortest round-trip formatting so a written panel parses
//! back bit-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::IndicatorPanel;

/// Daily spot fixings for one currency pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotSeries {
    /// Pair identifier, e.g. `"USDCNY"`.
    pub pair: String,
    /// Observation dates, strictly increasing.
    pub dates: Vec<NaiveDate>,
    /// Spot rates, strictly positive, same length as `dates`.
    pub rates: Vec<f64>,
}

impl SpotSeries {
    /// Check the structural invariants (monotone dates, positive rates).
    pub fn validate(&self) -> Result<()> {
        if self.dates.len() != self.rates.len() {
            return Err(Error::Validation(format!(
                "{}: {} dates but {} rates",
                self.pair,
                self.dates.len(),
                self.rates.len()
            )));
        }
        for w in self.dates.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Validation(format!(
                    "{}: dates not strictly increasing at {}",
                    self.pair, w[1]
                )));
            }
        }
        for (d, r) in self.dates.iter().zip(&self.rates) {
            if !r.is_finite() || *r <= 0.0 {
                return Err(Error::Validation(format!(
                    "{}: rate must be positive and finite, got {} on {}",
                    self.pair, r, d
                )));
            }
        }
        Ok(())
    }

    /// Position of `date` in the series, if observed.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

/// One non-deliverable forward contract record.
#[derive(Debug, Clone, PartialEq)]
pub struct NdfRecord {
    pub pair: String,
    pub start_date: NaiveDate,
    pub fix_date: NaiveDate,
    /// Contract notional in USD; zero is allowed (cancelled/corrected trades).
    pub notional_usd: f64,
}

impl NdfRecord {
    /// Contract tenor in calendar days (fixing date minus start date).
    pub fn tenor_days(&self) -> i64 {
        (self.fix_date - self.start_date).num_days()
    }
}

/// Daily traded volume per tenor for one pair: `volumes[t][a-1]` is the total
/// notional of contracts starting on `dates[t]` with a tenor of `a` days.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCube {
    pub pair: String,
    pub dates: Vec<NaiveDate>,
    /// Number of admissible tenors; columns cover 1..=a_max days.
    pub a_max: usize,
    /// Row-major `dates.len() × a_max` matrix, all entries ≥ 0.
    pub volumes: Vec<f64>,
}

impl VolumeCube {
    /// Volume for day index `t` and tenor `a` (1-based, in days).
    pub fn get(&self, t: usize, a: usize) -> f64 {
        assert!(a >= 1 && a <= self.a_max, "tenor {a} out of 1..={}", self.a_max);
        self.volumes[t * self.a_max + (a - 1)]
    }

    /// Volumes for all tenors on day index `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.volumes[t * self.a_max..(t + 1) * self.a_max]
    }
}

/// Records dropped during volume aggregation, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AggregateStats {
    /// Tenor exceeded `a_max`.
    pub dropped_long_tenor: usize,
    /// Start date not on the trading calendar.
    pub dropped_off_calendar: usize,
}

/// Which feature family a panel column belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnGroup {
    Spot,
    Indicator,
    Volume,
}

/// Name and group of one panel column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub group: ColumnGroup,
}

/// The merged feature matrix: spots, indicators and volumes on one calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPanel {
    pub dates: Vec<NaiveDate>,
    pub columns: Vec<ColumnMeta>,
    /// Row-major `dates.len() × columns.len()` matrix.
    pub values: Vec<f64>,
}

impl AlignedPanel {
    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// All feature values for row `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.n_cols();
        &self.values[t * m..(t + 1) * m]
    }

    /// Contiguous block of rows `[t0, t1)` — the zero-copy window view used
    /// by the dataset builder.
    pub fn rows(&self, t0: usize, t1: usize) -> &[f64] {
        let m = self.n_cols();
        &self.values[t0 * m..t1 * m]
    }

    /// Index of a column by name.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Row index of a date, if present.
    pub fn row_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    fn check_no_nan(&self) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            let m = self.n_cols();
            return Err(Error::Validation(format!(
                "panel contains non-finite value at row {} column {}",
                pos / m,
                self.columns[pos % m].name
            )));
        }
        Ok(())
    }
}

/// Trailing per-column mean/std series backing a normalized panel. Rows align
/// with the rows of the normalized panel (warm-up rows already dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct RollingStats {
    pub window: usize,
    /// Row-major, same shape as the normalized panel values.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Sidecar metadata persisted next to a panel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub columns: Vec<ColumnMeta>,
    /// Normalization window, if the panel has been normalized.
    pub normalize_window: Option<usize>,
    /// Rows removed for indicator warm-up during alignment.
    pub dropped_warmup_rows: usize,
    /// Rows removed for the incomplete normalization window.
    pub dropped_normalize_rows: usize,
    /// Volumes are z-scored with the same rule as every other column.
    pub normalize_all_columns: bool,
    /// Longest spot gap that alignment will forward-fill.
    pub forward_fill_limit: usize,
    /// Free-form provenance notes (e.g. AR fallback flags).
    pub notes: Vec<String>,
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| format!("bad date {s:?}, expected YYYY-MM-DD"))
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| format!("bad number {s:?}"))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), into_io(e)))
}

fn into_io(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{other:?}")),
    }
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Parse a wide spot CSV (`date,<PAIR1>,<PAIR2>,...`) into one series per
/// pair column. Empty cells mean "no observation"; rows are sorted by date
/// and duplicate dates are rejected.
pub fn parse_spot_csv(path: impl AsRef<Path>) -> Result<Vec<SpotSeries>> {
    let path = path.as_ref();
    let loc = path.display().to_string();
    let mut rdr = csv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::io(loc.clone(), into_io(e)))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("date") {
        return Err(Error::Parse {
            path: loc,
            line: 1,
            msg: "spot header must start with \"date\"".into(),
        });
    }
    let pairs: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    if pairs.is_empty() {
        return Err(Error::Parse {
            path: loc,
            line: 1,
            msg: "spot file has no pair columns".into(),
        });
    }

    // (date, per-pair optional rate), collected then sorted by date.
    let mut rows: Vec<(NaiveDate, usize, Vec<Option<f64>>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::io(loc.clone(), into_io(e)))?;
        let line = record_line(&rec);
        let date = parse_date(rec.get(0).unwrap_or("")).map_err(|msg| Error::Parse {
            path: loc.clone(),
            line,
            msg,
        })?;
        let mut cells = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let raw = rec.get(i + 1).unwrap_or("").trim();
            if raw.is_empty() {
                cells.push(None);
                continue;
            }
            let v = parse_f64(raw).map_err(|msg| Error::Parse {
                path: loc.clone(),
                line,
                msg: format!("{pair}: {msg}"),
            })?;
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Validation(format!(
                    "{loc}:{line}: {pair}: rate must be positive and finite, got {v}"
                )));
            }
            cells.push(Some(v));
        }
        rows.push((date, line, cells));
    }
    rows.sort_by_key(|(d, _, _)| *d);
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Validation(format!(
                "{loc}:{line}: duplicate date {date}",
                line = w[1].1,
                date = w[1].0
            )));
        }
    }

    let mut out: Vec<SpotSeries> = pairs
        .iter()
        .map(|p| SpotSeries {
            pair: p.clone(),
            dates: Vec::new(),
            rates: Vec::new(),
        })
        .collect();
    for (date, _, cells) in rows {
        for (i, cell) in cells.into_iter().enumerate() {
            if let Some(v) = cell {
                out[i].dates.push(date);
                out[i].rates.push(v);
            }
        }
    }
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

/// Write spot series back to the wide CSV format. Series may cover different
/// dates; absent observations become empty cells. Rates are printed with
/// shortest round-trip formatting, so parse → write → parse is lossless.
pub fn write_spot_csv(path: impl AsRef<Path>, series: &[SpotSeries]) -> Result<()> {
    let path = path.as_ref();
    for s in series {
        s.validate()?;
    }
    let mut calendar: Vec<NaiveDate> = series.iter().flat_map(|s| s.dates.iter().copied()).collect();
    calendar.sort_unstable();
    calendar.dedup();

    let mut text = String::from("date");
    for s in series {
        text.push(',');
        text.push_str(&s.pair);
    }
    text.push('\n');
    // Per-series cursor advances in lockstep with the merged calendar.
    let mut cursors = vec![0usize; series.len()];
    for date in &calendar {
        let _ = write!(text, "{date}");
        for (s, cur) in series.iter().zip(cursors.iter_mut()) {
            text.push(',');
            if *cur < s.dates.len() && s.dates[*cur] == *date {
                let _ = write!(text, "{}", s.rates[*cur]);
                *cur += 1;
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse NDF contract records (`pair,start_date,fix_date,notional_usd`).
/// Order is preserved. Records with `fix_date <= start_date` or negative
/// notional are rejected.
pub fn parse_ndf_records(path: impl AsRef<Path>) -> Result<Vec<NdfRecord>> {
    let path = path.as_ref();
    let loc = path.display().to_string();
    let mut rdr = csv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::io(loc.clone(), into_io(e)))?
        .clone();
    let expect = ["pair", "start_date", "fix_date", "notional_usd"];
    let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
    if got != expect {
        return Err(Error::Parse {
            path: loc,
            line: 1,
            msg: format!("NDF header must be {expect:?}, got {got:?}"),
        });
    }

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::io(loc.clone(), into_io(e)))?;
        let line = record_line(&rec);
        let perr = |msg: String| Error::Parse {
            path: loc.clone(),
            line,
            msg,
        };
        let pair = rec.get(0).unwrap_or("").trim().to_string();
        if pair.is_empty() {
            return Err(perr("empty pair name".into()));
        }
        let start_date = parse_date(rec.get(1).unwrap_or("")).map_err(perr)?;
        let perr = |msg: String| Error::Parse {
            path: loc.clone(),
            line,
            msg,
        };
        let fix_date = parse_date(rec.get(2).unwrap_or("")).map_err(perr)?;
        let perr = |msg: String| Error::Parse {
            path: loc.clone(),
            line,
            msg,
        };
        let notional_usd = parse_f64(rec.get(3).unwrap_or("")).map_err(perr)?;
        if fix_date <= start_date {
            return Err(Error::Validation(format!(
                "{loc}:{line}: fix_date {fix_date} must be after start_date {start_date}"
            )));
        }
        if !notional_usd.is_finite() || notional_usd < 0.0 {
            return Err(Error::Validation(format!(
                "{loc}:{line}: notional must be non-negative and finite, got {notional_usd}"
            )));
        }
        out.push(NdfRecord {
            pair,
            start_date,
            fix_date,
            notional_usd,
        });
    }
    Ok(out)
}

/// Write NDF records in the canonical CSV schema.
pub fn write_ndf_csv(path: impl AsRef<Path>, records: &[NdfRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("pair,start_date,fix_date,notional_usd\n");
    for r in records {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            r.pair, r.start_date, r.fix_date, r.notional_usd
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Aggregate contract records for one pair into a daily per-tenor volume
/// cube over `calendar`: `v[t][a] = Σ notional` of records of that pair
/// starting on day `t` with tenor `a` days.
///
/// Records with tenor beyond `a_max`, or starting off-calendar, are dropped
/// and counted in the returned stats. Summation happens in a canonical order
/// (sorted by value within each cell), so the result is bit-identical under
/// any permutation of the input records.
pub fn aggregate_volumes(
    records: &[NdfRecord],
    pair: &str,
    calendar: &[NaiveDate],
    a_max: usize,
) -> Result<(VolumeCube, AggregateStats)> {
    if a_max < 1 {
        return Err(Error::Config(format!("a_max must be >= 1, got {a_max}")));
    }
    if calendar.is_empty() {
        return Err(Error::Validation("aggregation calendar is empty".into()));
    }
    let date_index: BTreeMap<NaiveDate, usize> = calendar
        .iter()
        .copied()
        .enumerate()
        .map(|(i, d)| (d, i))
        .collect();

    let mut stats = AggregateStats::default();
    // (cell, notional) pairs, sorted for order-independent summation.
    let mut hits: Vec<(usize, f64)> = Vec::new();
    for r in records.iter().filter(|r| r.pair == pair) {
        let tenor = r.tenor_days();
        debug_assert!(tenor >= 1, "parse stage guarantees fix > start");
        if tenor as usize > a_max {
            stats.dropped_long_tenor += 1;
            continue;
        }
        let Some(&t) = date_index.get(&r.start_date) else {
            stats.dropped_off_calendar += 1;
            continue;
        };
        hits.push((t * a_max + (tenor as usize - 1), r.notional_usd));
    }
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut volumes = vec![0.0; calendar.len() * a_max];
    for (cell, notional) in hits {
        volumes[cell] += notional;
    }
    Ok((
        VolumeCube {
            pair: pair.to_string(),
            dates: calendar.to_vec(),
            a_max,
            volumes,
        },
        stats,
    ))
}

/// Put all spot series on one shared trading calendar.
///
/// The calendar is the union of observation dates inside the overlap window
/// `[max(first dates), min(last dates)]`. Gaps inside it are forward-filled
/// from the most recent observation, but only across at most `max_fill_days`
/// calendar days — longer gaps are treated as data faults.
pub fn align_spots(series: &[SpotSeries], max_fill_days: i64) -> Result<Vec<SpotSeries>> {
    if series.is_empty() {
        return Err(Error::Validation("no spot series to align".into()));
    }
    for s in series {
        s.validate()?;
        if s.dates.is_empty() {
            return Err(Error::Validation(format!("{}: series is empty", s.pair)));
        }
    }
    let begin = series.iter().map(|s| s.dates[0]).max().unwrap();
    let end = series.iter().map(|s| *s.dates.last().unwrap()).min().unwrap();
    if begin > end {
        return Err(Error::Validation(
            "spot series have no overlapping date range".into(),
        ));
    }
    let mut calendar: Vec<NaiveDate> = series
        .iter()
        .flat_map(|s| s.dates.iter().copied())
        .filter(|d| *d >= begin && *d <= end)
        .collect();
    calendar.sort_unstable();
    calendar.dedup();

    let mut out = Vec::with_capacity(series.len());
    for s in series {
        let mut dates = Vec::with_capacity(calendar.len());
        let mut rates = Vec::with_capacity(calendar.len());
        let mut cur = 0usize; // cursor into s.dates
        let mut last: Option<(NaiveDate, f64)> = None;
        for &day in &calendar {
            while cur < s.dates.len() && s.dates[cur] <= day {
                last = Some((s.dates[cur], s.rates[cur]));
                cur += 1;
            }
            let (obs_date, rate) = last.expect("calendar starts at max(first dates)");
            if obs_date != day {
                let gap = (day - obs_date).num_days();
                if gap > max_fill_days {
                    return Err(Error::Validation(format!(
                        "{}: gap of {gap} days ending {day} exceeds forward-fill limit of {max_fill_days}",
                        s.pair
                    )));
                }
            }
            dates.push(day);
            rates.push(rate);
        }
        out.push(SpotSeries {
            pair: s.pair.clone(),
            dates,
            rates,
        });
    }
    Ok(out)
}

/// Merge aligned spots, the indicator panel, and volume cubes into one
/// feature matrix.
///
/// All inputs must already share one calendar (see [`align_spots`]). Rows
/// before the longest indicator warm-up are dropped. Columns are ordered:
/// spots, then indicators, then volumes — each block alphabetical by name,
/// so the layout is a pure function of the input set.
pub fn align_panel(
    spots: &[SpotSeries],
    indicators: &IndicatorPanel,
    cubes: &[VolumeCube],
) -> Result<AlignedPanel> {
    if spots.is_empty() {
        return Err(Error::Validation("panel needs at least one spot series".into()));
    }
    let calendar = &spots[0].dates;
    if calendar.is_empty() {
        return Err(Error::Validation("empty calendar intersection".into()));
    }
    for s in spots {
        s.validate()?;
        if &s.dates != calendar {
            return Err(Error::Validation(format!(
                "{}: spot series not on the shared calendar (run alignment first)",
                s.pair
            )));
        }
    }
    if !indicators.columns.is_empty() && indicators.dates != *calendar {
        return Err(Error::Validation(
            "indicator panel calendar does not match spot calendar".into(),
        ));
    }
    for c in cubes {
        if c.dates != *calendar {
            return Err(Error::Validation(format!(
                "{}: volume cube calendar does not match spot calendar",
                c.pair
            )));
        }
    }

    let warmup = indicators.columns.iter().map(|c| c.warmup).max().unwrap_or(0);
    if warmup >= calendar.len() {
        return Err(Error::Validation(format!(
            "indicator warm-up of {warmup} rows consumes the whole {}-row calendar",
            calendar.len()
        )));
    }

    let mut spot_order: Vec<usize> = (0..spots.len()).collect();
    spot_order.sort_by(|&a, &b| spots[a].pair.cmp(&spots[b].pair));
    let mut ind_order: Vec<usize> = (0..indicators.columns.len()).collect();
    ind_order.sort_by(|&a, &b| indicators.columns[a].name.cmp(&indicators.columns[b].name));
    let mut cube_order: Vec<usize> = (0..cubes.len()).collect();
    cube_order.sort_by(|&a, &b| cubes[a].pair.cmp(&cubes[b].pair));

    let mut columns: Vec<ColumnMeta> = Vec::new();
    for &i in &spot_order {
        columns.push(ColumnMeta {
            name: spots[i].pair.clone(),
            group: ColumnGroup::Spot,
        });
    }
    for &i in &ind_order {
        columns.push(ColumnMeta {
            name: indicators.columns[i].name.clone(),
            group: ColumnGroup::Indicator,
        });
    }
    let tenor_width = cubes
        .iter()
        .map(|c| c.a_max.to_string().len())
        .max()
        .unwrap_or(2);
    for &i in &cube_order {
        for a in 1..=cubes[i].a_max {
            columns.push(ColumnMeta {
                name: format!("{}_VOL_{:0w$}", cubes[i].pair, a, w = tenor_width),
                group: ColumnGroup::Volume,
            });
        }
    }
    {
        let mut names: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("duplicate column name {:?}", w[0])));
        }
    }

    let rows = calendar.len() - warmup;
    let m = columns.len();
    let mut values = vec![0.0; rows * m];
    for (out_t, t) in (warmup..calendar.len()).enumerate() {
        let row = &mut values[out_t * m..(out_t + 1) * m];
        let mut j = 0usize;
        for &i in &spot_order {
            row[j] = spots[i].rates[t];
            j += 1;
        }
        for &i in &ind_order {
            row[j] = indicators.columns[i].values[t];
            j += 1;
        }
        for &i in &cube_order {
            let src = cubes[i].row(t);
            row[j..j + src.len()].copy_from_slice(src);
            j += src.len();
        }
        debug_assert_eq!(j, m);
    }

    let panel = AlignedPanel {
        dates: calendar[warmup..].to_vec(),
        columns,
        values,
    };
    panel.check_no_nan().map_err(|e| {
        Error::Validation(format!("{e} (indicator warm-up marking is inconsistent)"))
    })?;
    Ok(panel)
}

/// Z-score every panel column against a trailing window that includes the
/// current row. Rows without a complete window are dropped. Columns with
/// zero dispersion in a window produce 0 for that row (a constant feature
/// normalizes to "no signal" rather than dividing by zero). Population
/// standard deviation throughout.
pub fn rolling_normalize(panel: &AlignedPanel, window: usize) -> Result<(AlignedPanel, RollingStats)> {
    if window < 2 {
        return Err(Error::Config(format!("normalization window must be >= 2, got {window}")));
    }
    if panel.n_rows() <= window {
        return Err(Error::Validation(format!(
            "panel has {} rows, need more than the {window}-row window",
            panel.n_rows()
        )));
    }
    let m = panel.n_cols();
    let rows_out = panel.n_rows() - (window - 1);
    let mut values = vec![0.0; rows_out * m];
    let mut means = vec![0.0; rows_out * m];
    let mut stds = vec![0.0; rows_out * m];

    // Two-pass mean/variance per window: O(T·w) per column, numerically
    // robust for large-magnitude series with small fluctuations.
    for j in 0..m {
        for out_t in 0..rows_out {
            let t = out_t + window - 1;
            let lo = t + 1 - window;
            let mut sum = 0.0;
            for r in lo..=t {
                sum += panel.values[r * m + j];
            }
            let mean = sum / window as f64;
            let mut ss = 0.0;
            for r in lo..=t {
                let d = panel.values[r * m + j] - mean;
                ss += d * d;
            }
            let std = (ss / window as f64).sqrt();
            let x = panel.values[t * m + j];
            values[out_t * m + j] = if std == 0.0 { 0.0 } else { (x - mean) / std };
            means[out_t * m + j] = mean;
            stds[out_t * m + j] = std;
        }
    }

    let out = AlignedPanel {
        dates: panel.dates[window - 1..].to_vec(),
        columns: panel.columns.clone(),
        values,
    };
    out.check_no_nan()?;
    Ok((
        out,
        RollingStats {
            window,
            means,
            stds,
        },
    ))
}

/// Write a panel as CSV (plus nothing else — metadata goes through
/// [`write_panel_meta`]). Values use shortest round-trip float formatting.
pub fn write_panel_csv(path: impl AsRef<Path>, panel: &AlignedPanel) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("date");
    for c in &panel.columns {
        text.push(',');
        text.push_str(&c.name);
    }
    text.push('\n');
    for (t, date) in panel.dates.iter().enumerate() {
        let _ = write!(text, "{date}");
        for v in panel.row(t) {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the JSON sidecar describing a panel CSV.
pub fn write_panel_meta(path: impl AsRef<Path>, meta: &PanelMeta) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Validation(format!("metadata serialization failed: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a panel CSV together with its sidecar metadata. Column names in the
/// CSV header must match the sidecar exactly.
pub fn read_panel(csv_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<(AlignedPanel, PanelMeta)> {
    let meta_path = meta_path.as_ref();
    let meta_text = std::fs::read_to_string(meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: PanelMeta = serde_json::from_str(&meta_text).map_err(|e| {
        Error::Parse {
            path: meta_path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        }
    })?;

    let csv_path = csv_path.as_ref();
    let loc = csv_path.display().to_string();
    let mut rdr = csv_reader(csv_path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::io(loc.clone(), into_io(e)))?
        .clone();
    let names: Vec<&str> = headers.iter().skip(1).collect();
    if headers.get(0) != Some("date")
        || names.len() != meta.columns.len()
        || names
            .iter()
            .zip(&meta.columns)
            .any(|(n, c)| *n != c.name)
    {
        return Err(Error::Validation(format!(
            "{loc}: header does not match sidecar metadata"
        )));
    }

    let mut dates = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::io(loc.clone(), into_io(e)))?;
        let line = record_line(&rec);
        let date = parse_date(rec.get(0).unwrap_or("")).map_err(|msg| Error::Parse {
            path: loc.clone(),
            line,
            msg,
        })?;
        dates.push(date);
        for i in 0..names.len() {
            let v = parse_f64(rec.get(i + 1).unwrap_or("")).map_err(|msg| Error::Parse {
                path: loc.clone(),
                line,
                msg: format!("{}: {msg}", names[i]),
            })?;
            values.push(v);
        }
    }
    let panel = AlignedPanel {
        dates,
        columns: meta.columns.clone(),
        values,
    };
    Ok((panel, meta))
}

/// Write one pair's volume cube as CSV (`date,VOL_01,...`).
pub fn write_cube_csv(path: impl AsRef<Path>, cube: &VolumeCube) -> Result<()> {
    let path = path.as_ref();
    let w = cube.a_max.to_string().len();
    let mut text = String::from("date");
    for a in 1..=cube.a_max {
        let _ = write!(text, ",VOL_{a:0w$}");
    }
    text.push('\n');
    for (t, date) in cube.dates.iter().enumerate() {
        let _ = write!(text, "{date}");
        for v in cube.row(t) {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a volume cube written by [`write_cube_csv`]. The pair name is not
/// stored in the file and must be supplied by the caller.
pub fn read_cube_csv(path: impl AsRef<Path>, pair: &str) -> Result<VolumeCube> {
    let path = path.as_ref();
    let loc = path.display().to_string();
    let mut rdr = csv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::io(loc.clone(), into_io(e)))?
        .clone();
    let a_max = headers.len().saturating_sub(1);
    if headers.get(0) != Some("date") || a_max == 0 {
        return Err(Error::Parse {
            path: loc,
            line: 1,
            msg: "cube header must be date,VOL_01,...".into(),
        });
    }
    let mut dates = Vec::new();
    let mut volumes = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::io(loc.clone(), into_io(e)))?;
        let line = record_line(&rec);
        let date = parse_date(rec.get(0).unwrap_or("")).map_err(|msg| Error::Parse {
            path: loc.clone(),
            line,
            msg,
        })?;
        dates.push(date);
        for i in 0..a_max {
            let v = parse_f64(rec.get(i + 1).unwrap_or("")).map_err(|msg| Error::Parse {
                path: loc.clone(),
                line,
                msg,
            })?;
            if v < 0.0 {
                return Err(Error::Validation(format!(
                    "{loc}:{line}: negative volume {v}"
                )));
            }
            volumes.push(v);
        }
    }
    Ok(VolumeCube {
        pair: pair.to_string(),
        dates,
        a_max,
        volumes,
    })
}
