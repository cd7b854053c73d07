//! Deterministic synthetic FX market generator.
//!
//! Real NDF flow data is proprietary, so the pipeline ships a generator
//! that produces the same artifacts ingestion expects: spot series for a
//! catalog of USD pairs on a weekday calendar, and dated NDF records for
//! the deliverable-restricted pairs. Spots follow a geometric random walk
//! with per-pair regime overrides (planted drift/volatility segments);
//! NDF tenors are drawn from a short-skewed truncated geometric, except
//! that a configurable fraction of records is "informed" and lands on the
//! hindsight-optimal tenor — this is what makes the volume-derived expert
//! labels imitation-worthy while keeping them noisy.
//!
//! Everything is a pure function of [`SynthConfig`]: same config, same
//! bytes out.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{NdfRecord, SpotSeries};
use crate::labels::{optimal_labels, TenorSet};

/// USD pairs with plausible base rates. The first entries are the pairs
/// that actually trade as NDFs (deliverability restrictions); the rest
/// serve as exogenous context series.
pub const PAIR_CATALOG: [(&str, f64); 64] = [
    ("USDBRL", 3.90),
    ("USDCNY", 6.88),
    ("USDIDR", 14080.0),
    ("USDINR", 71.2),
    ("USDKRW", 1154.0),
    ("USDTWD", 30.9),
    ("USDMYR", 4.18),
    ("USDSGD", 1.36),
    ("USDHKD", 7.83),
    ("USDTHB", 31.1),
    ("USDPHP", 52.0),
    ("USDVND", 23200.0),
    ("USDJPY", 108.4),
    ("USDCHF", 0.99),
    ("USDCAD", 1.32),
    ("USDMXN", 19.2),
    ("USDZAR", 14.6),
    ("USDTRY", 5.68),
    ("USDPLN", 3.85),
    ("USDHUF", 291.0),
    ("USDCZK", 22.9),
    ("USDNOK", 8.84),
    ("USDSEK", 9.61),
    ("USDDKK", 6.67),
    ("USDILS", 3.55),
    ("USDCLP", 708.0),
    ("USDCOP", 3330.0),
    ("USDPEN", 3.37),
    ("USDARS", 45.0),
    ("USDRUB", 64.7),
    ("USDRON", 4.24),
    ("USDBGN", 1.75),
    ("USDHRK", 6.63),
    ("USDISK", 124.0),
    ("USDKZT", 380.0),
    ("USDNGN", 306.0),
    ("USDEGP", 16.6),
    ("USDMAD", 9.62),
    ("USDPKR", 141.0),
    ("USDBDT", 84.5),
    ("USDLKR", 176.0),
    ("USDKES", 101.0),
    ("USDGHS", 5.21),
    ("USDUAH", 26.4),
    ("USDSAR", 3.75),
    ("USDAED", 3.67),
    ("USDQAR", 3.64),
    ("USDKWD", 0.30),
    ("USDBHD", 0.38),
    ("USDOMR", 0.385),
    ("USDJOD", 0.71),
    ("USDGEL", 2.77),
    ("USDAZN", 1.70),
    ("USDUZS", 8450.0),
    ("USDTJS", 9.43),
    ("USDKGS", 69.8),
    ("USDMNT", 2640.0),
    ("USDLAK", 8680.0),
    ("USDKHR", 4060.0),
    ("USDMMK", 1520.0),
    ("USDTND", 2.93),
    ("USDDZD", 119.0),
    ("USDIQD", 1190.0),
    ("USDETB", 28.9),
];

/// A drift/volatility override for one pair over a day-index range.
/// `[start_day, start_day + len)` in calendar positions. A strong positive
/// drift with zero volatility plants a clean up-trend whose interior
/// optimal labels are a_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSegment {
    pub pair: String,
    pub start_day: usize,
    pub len: usize,
    /// Per-day log-rate drift inside the segment.
    pub drift: f64,
    /// Per-day log-rate volatility inside the segment; must be ≥ 0.
    pub vol: f64,
}

/// Generator parameters. All randomness descends from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Trading days to generate; at least 300.
    pub days: usize,
    /// Leading catalog pairs to emit spot series for (1..=64).
    pub n_pairs: usize,
    /// Leading catalog pairs that also get NDF records (≤ n_pairs).
    pub n_ndf_pairs: usize,
    /// Calendar starts at the first weekday ≥ this date.
    pub start_date: NaiveDate,
    /// Tenor cap for NDF sampling.
    pub a_max: usize,
    /// Baseline per-day log drift outside any regime segment.
    pub base_drift: f64,
    /// Baseline per-day log volatility outside any regime segment; ≥ 0.
    pub base_vol: f64,
    /// Upper bound on NDF records per pair per day (count is uniform in
    /// 1..=this).
    pub records_per_day: usize,
    /// Probability that a record's tenor is the hindsight-optimal one
    /// (when that label is defined and nonzero); in [0, 1].
    pub informed_fraction: f64,
    /// Success probability of the truncated-geometric tenor draw; in
    /// (0, 1). Larger values skew tenors shorter.
    pub tenor_decay: f64,
    pub regimes: Vec<RegimeSegment>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            days: 600,
            n_pairs: 8,
            n_ndf_pairs: 2,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 5).unwrap(),
            a_max: 90,
            base_drift: 0.0,
            base_vol: 0.004,
            records_per_day: 6,
            informed_fraction: 0.6,
            tenor_decay: 0.08,
            regimes: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days < 300 {
            return Err(Error::Config(format!(
                "synthetic market needs days >= 300, got {}",
                self.days
            )));
        }
        if self.n_pairs < 1 || self.n_pairs > PAIR_CATALOG.len() {
            return Err(Error::Config(format!(
                "n_pairs must be 1..={}, got {}",
                PAIR_CATALOG.len(),
                self.n_pairs
            )));
        }
        if self.n_ndf_pairs < 1 || self.n_ndf_pairs > self.n_pairs {
            return Err(Error::Config(format!(
                "n_ndf_pairs must be 1..=n_pairs ({}), got {}",
                self.n_pairs, self.n_ndf_pairs
            )));
        }
        if self.a_max < 1 || self.a_max >= self.days {
            return Err(Error::Config(format!(
                "a_max must be in 1..days ({}), got {}",
                self.days, self.a_max
            )));
        }
        if !self.base_drift.is_finite() || !self.base_vol.is_finite() || self.base_vol < 0.0 {
            return Err(Error::Config(format!(
                "base drift/vol must be finite with vol >= 0, got {} / {}",
                self.base_drift, self.base_vol
            )));
        }
        if self.records_per_day < 1 {
            return Err(Error::Config("records_per_day must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.informed_fraction) {
            return Err(Error::Config(format!(
                "informed_fraction must be in [0, 1], got {}",
                self.informed_fraction
            )));
        }
        if !(self.tenor_decay > 0.0 && self.tenor_decay < 1.0) {
            return Err(Error::Config(format!(
                "tenor_decay must be in (0, 1), got {}",
                self.tenor_decay
            )));
        }
        let names: Vec<&str> = PAIR_CATALOG[..self.n_pairs].iter().map(|p| p.0).collect();
        for (i, seg) in self.regimes.iter().enumerate() {
            if !names.contains(&seg.pair.as_str()) {
                return Err(Error::Config(format!(
                    "regime {i} names pair {} outside the generated set",
                    seg.pair
                )));
            }
            if seg.len == 0 || seg.start_day + seg.len > self.days {
                return Err(Error::Config(format!(
                    "regime {i} spans days {}..{} outside 0..{}",
                    seg.start_day,
                    seg.start_day + seg.len,
                    self.days
                )));
            }
            if !seg.drift.is_finite() || !seg.vol.is_finite() || seg.vol < 0.0 {
                return Err(Error::Config(format!(
                    "regime {i} drift/vol must be finite with vol >= 0"
                )));
            }
            for (j, other) in self.regimes[..i].iter().enumerate() {
                if other.pair == seg.pair
                    && seg.start_day < other.start_day + other.len
                    && other.start_day < seg.start_day + seg.len
                {
                    return Err(Error::Config(format!(
                        "regimes {j} and {i} overlap on {}",
                        seg.pair
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A generated market: aligned spot series plus raw NDF records, all on
/// one weekday calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMarket {
    pub calendar: Vec<NaiveDate>,
    pub spots: Vec<SpotSeries>,
    pub records: Vec<NdfRecord>,
}

/// The first `days` weekdays starting at the first weekday ≥ `start`.
pub fn weekday_calendar(start: NaiveDate, days: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(days);
    let mut d = start;
    while out.len() < days {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// Per-day (drift, vol) for one pair after applying regime overrides.
fn day_params(cfg: &SynthConfig, pair: &str, day: usize) -> (f64, f64) {
    for seg in &cfg.regimes {
        if seg.pair == pair && day >= seg.start_day && day < seg.start_day + seg.len {
            return (seg.drift, seg.vol);
        }
    }
    (cfg.base_drift, cfg.base_vol)
}

/// Generate the full market for a config. Deterministic in `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthMarket> {
    config.validate()?;
    let calendar = weekday_calendar(config.start_date, config.days);
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);

    // Spot series: one sub-generator per pair, drawn from the master in
    // catalog order so adding pairs never reshuffles earlier ones.
    let mut spots = Vec::with_capacity(config.n_pairs);
    for &(pair, base) in &PAIR_CATALOG[..config.n_pairs] {
        let mut rng = ChaCha8Rng::from_rng(&mut master)
            .map_err(|e| Error::Compute(format!("rng derivation failed: {e}")))?;
        let mut log_rate = base.ln();
        let mut rates = Vec::with_capacity(config.days);
        for day in 0..config.days {
            rates.push(log_rate.exp());
            let (drift, vol) = day_params(config, pair, day);
            // Draw unconditionally so regime edits never shift the stream.
            let z: f64 = StandardNormal.sample(&mut rng);
            log_rate += drift + vol * z;
        }
        spots.push(SpotSeries {
            pair: pair.to_string(),
            dates: calendar.clone(),
            rates,
        });
    }

    // NDF records. Informed tenors follow the hindsight-optimal label of
    // the record's own pair; the rest fall on a truncated geometric.
    // Volume aggregation buckets a record by its calendar-day span
    // (fix − start), so the class a record should land in is encoded by
    // plain date addition — fixing dates may fall on weekends or beyond
    // the spot sample, which aggregation tolerates (it only requires the
    // start date on-calendar).
    let tenors = TenorSet::new(config.a_max)?;
    let mut ndf_rng = ChaCha8Rng::from_rng(&mut master)
        .map_err(|e| Error::Compute(format!("rng derivation failed: {e}")))?;
    let mut records = Vec::new();
    for spot in &spots[..config.n_ndf_pairs] {
        let optimal = optimal_labels(spot, tenors)?;
        for (t, &date) in calendar.iter().enumerate() {
            let n_records = ndf_rng.gen_range(1..=config.records_per_day);
            for _ in 0..n_records {
                let informed = ndf_rng.gen::<f64>() < config.informed_fraction;
                let label = optimal.labels.get(t).copied().unwrap_or(0);
                let a = if informed && label > 0 {
                    label
                } else {
                    // Truncated geometric on 1..=a_max.
                    let u: f64 = ndf_rng.gen();
                    let raw = 1 + ((1.0 - u).ln() / (1.0 - config.tenor_decay).ln()) as usize;
                    raw.min(config.a_max)
                };
                let notional = 10f64.powf(ndf_rng.gen_range(5.0..7.5));
                records.push(NdfRecord {
                    pair: spot.pair.clone(),
                    start_date: date,
                    fix_date: date + Days::new(a as u64),
                    notional_usd: notional,
                });
            }
        }
    }

    Ok(SynthMarket {
        calendar,
        spots,
        records,
    })
}
