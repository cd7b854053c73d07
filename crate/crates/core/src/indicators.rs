//! Technical indicators derived from spot series.
//!
//! Eight indicator columns per pair — SMA(7), SMA(21), EMA(12), EMA(26),
//! MACD, 20-day rolling standard deviation, and the two Bollinger bands —
//! plus a one-step AR forecast for the NDF pairs (and USDMYR, their closest
//! deliverable cousin). Every indicator is causal: the value at position `t`
//! depends only on observations at positions `≤ t`.
//!
//! Values before an indicator's warm-up are marked `NaN` and carried through
//! to alignment, where the longest warm-up determines how many leading rows
//! the panel drops. NaN marking (rather than zero-filling) means a bookkeeping
//! bug surfaces as a loud validation error instead of a silent fake feature.

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::ingest::SpotSeries;

/// One indicator series aligned to its source spot series.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSeries {
    /// Number of leading positions without a defined value (set to NaN).
    pub warmup: usize,
    /// Same length as the source series.
    pub values: Vec<f64>,
}

/// A named indicator column inside a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorColumn {
    pub name: String,
    pub warmup: usize,
    pub values: Vec<f64>,
}

/// All indicator columns on one shared calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorPanel {
    pub dates: Vec<NaiveDate>,
    pub columns: Vec<IndicatorColumn>,
}

/// Fitted autoregression metadata, reported alongside the forecast series.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    /// Intercept of the difference regression.
    pub intercept: f64,
    /// Lag coefficients φ_1..φ_p.
    pub phi: Vec<f64>,
    /// True when the normal equations were singular and the forecast fell
    /// back to persistence (x̂_{t+1} = x_t).
    pub fallback: bool,
}

/// Simple moving average over a trailing window of `n` observations.
pub fn sma(x: &[f64], n: usize) -> Result<IndicatorSeries> {
    if n < 1 {
        return Err(Error::Config(format!("SMA window must be >= 1, got {n}")));
    }
    if x.len() < n {
        return Err(Error::Validation(format!(
            "SMA window {n} exceeds series length {}",
            x.len()
        )));
    }
    let mut values = vec![f64::NAN; x.len()];
    for t in (n - 1)..x.len() {
        let win = &x[t + 1 - n..=t];
        values[t] = win.iter().sum::<f64>() / n as f64;
    }
    Ok(IndicatorSeries {
        warmup: n - 1,
        values,
    })
}

/// Exponential moving average: μ_1 = x_1, μ_t = α·x_t + (1−α)·μ_{t−1} with
/// the conventional smoothing constant α = 2/(n+1). Defined from the first
/// observation, so there is no warm-up.
pub fn ema(x: &[f64], n: usize) -> Result<IndicatorSeries> {
    if n < 1 {
        return Err(Error::Config(format!("EMA window must be >= 1, got {n}")));
    }
    if x.is_empty() {
        return Err(Error::Validation("EMA of empty series".into()));
    }
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut values = Vec::with_capacity(x.len());
    let mut mu = x[0];
    values.push(mu);
    for &v in &x[1..] {
        mu = alpha * v + (1.0 - alpha) * mu;
        values.push(mu);
    }
    Ok(IndicatorSeries { warmup: 0, values })
}

/// Moving average convergence/divergence: EMA(12) − EMA(26), pointwise.
pub fn macd(x: &[f64]) -> Result<IndicatorSeries> {
    let fast = ema(x, 12)?;
    let slow = ema(x, 26)?;
    let values = fast
        .values
        .iter()
        .zip(&slow.values)
        .map(|(a, b)| a - b)
        .collect();
    Ok(IndicatorSeries { warmup: 0, values })
}

/// Population standard deviation over a trailing window of `n` observations.
pub fn rolling_std(x: &[f64], n: usize) -> Result<IndicatorSeries> {
    if n < 2 {
        return Err(Error::Config(format!("RSD window must be >= 2, got {n}")));
    }
    if x.len() < n {
        return Err(Error::Validation(format!(
            "RSD window {n} exceeds series length {}",
            x.len()
        )));
    }
    let mut values = vec![f64::NAN; x.len()];
    for t in (n - 1)..x.len() {
        let win = &x[t + 1 - n..=t];
        let mean = win.iter().sum::<f64>() / n as f64;
        let var = win.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        values[t] = var.sqrt();
    }
    Ok(IndicatorSeries {
        warmup: n - 1,
        values,
    })
}

/// Bollinger bands: 21-day SMA ± 20-day rolling standard deviation.
pub fn bollinger(x: &[f64]) -> Result<(IndicatorSeries, IndicatorSeries)> {
    let mid = sma(x, 21)?;
    let rsd = rolling_std(x, 20)?;
    let warmup = mid.warmup.max(rsd.warmup);
    let mut upper = vec![f64::NAN; x.len()];
    let mut lower = vec![f64::NAN; x.len()];
    for t in warmup..x.len() {
        upper[t] = mid.values[t] + rsd.values[t];
        lower[t] = mid.values[t] - rsd.values[t];
    }
    Ok((
        IndicatorSeries {
            warmup,
            values: upper,
        },
        IndicatorSeries {
            warmup,
            values: lower,
        },
    ))
}

/// Solve a small dense linear system by Gaussian elimination with partial
/// pivoting. Returns `None` when the system is (numerically) singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in (col + 1)..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// One-step-ahead forecasts from an AR(p) model on first differences
/// (an integrated AR — the "I" of ARIMA — with no moving-average term).
///
/// Coefficients are fit by least squares on `x[0..train_end]` only and then
/// frozen: nothing at or beyond `train_end` influences the fit, so features
/// built from these forecasts leak no test-period information. The output
/// value at position `t ≥ train_end` is x̂_{t+1}, the model's view of the
/// next observation given everything up to `t`; earlier positions are NaN.
///
/// Singular normal equations (e.g. a constant series has all-zero
/// differences) fall back to the persistence forecast x̂_{t+1} = x_t, with
/// `fallback` set so the pipeline can record it.
pub fn ar_forecast(x: &[f64], order: usize, train_end: usize) -> Result<(IndicatorSeries, ArFit)> {
    let p = order;
    if p < 1 {
        return Err(Error::Config(format!("AR order must be >= 1, got {p}")));
    }
    if train_end > x.len() {
        return Err(Error::Config(format!(
            "AR train_end {train_end} exceeds series length {}",
            x.len()
        )));
    }
    let n_rows = train_end.saturating_sub(p + 1);
    if n_rows < 10 * p {
        return Err(Error::Config(format!(
            "AR({p}) fit needs at least {} observations before train_end, got {train_end}",
            10 * p + p + 1
        )));
    }

    // Difference series over the fit range only: d[t] = x[t] − x[t−1].
    let fit = &x[..train_end];
    let d: Vec<f64> = fit.windows(2).map(|w| w[1] - w[0]).collect();

    // Normal equations for d[t] ~ 1 + d[t−1] + ... + d[t−p], t = p..d.len().
    let k = p + 1;
    let mut ata = vec![vec![0.0; k]; k];
    let mut atb = vec![0.0; k];
    for t in p..d.len() {
        let mut row = Vec::with_capacity(k);
        row.push(1.0);
        for i in 1..=p {
            row.push(d[t - i]);
        }
        for i in 0..k {
            for j in 0..k {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * d[t];
        }
    }

    let (fit_meta, coeffs) = match solve_dense(ata, atb) {
        Some(c) => (
            ArFit {
                intercept: c[0],
                phi: c[1..].to_vec(),
                fallback: false,
            },
            c,
        ),
        None => (
            ArFit {
                intercept: 0.0,
                phi: vec![0.0; p],
                fallback: true,
            },
            vec![0.0; k],
        ),
    };

    let mut values = vec![f64::NAN; x.len()];
    for t in train_end..x.len() {
        // x̂_{t+1} = x_t + (c + Σ φ_i · d_{t+1−i}) where d_s = x_s − x_{s−1}.
        let mut delta = coeffs[0];
        for i in 1..=p {
            delta += coeffs[i] * (x[t + 1 - i] - x[t - i]);
        }
        values[t] = x[t] + delta;
    }
    Ok((
        IndicatorSeries {
            warmup: train_end,
            values,
        },
        fit_meta,
    ))
}

/// How many indicator columns one pair contributes (excluding AR forecasts).
pub const COLUMNS_PER_PAIR: usize = 8;

/// The deliverable proxy pair that always joins the AR-forecast targets.
pub const AR_PROXY_PAIR: &str = "USDMYR";

/// Build the full indicator panel over aligned spot series.
///
/// Every pair contributes its eight standard columns; pairs in `ndf_pairs`
/// plus [`AR_PROXY_PAIR`] additionally get an AR-forecast column. When
/// `ndf_pairs` is empty no AR columns are built at all (and the proxy pair
/// is not required to be present).
///
/// Returns the panel plus provenance notes (AR persistence fallbacks).
pub fn build_indicator_panel(
    spots: &[SpotSeries],
    ndf_pairs: &[String],
    ar_order: usize,
    ar_train_end: usize,
) -> Result<(IndicatorPanel, Vec<String>)> {
    if spots.is_empty() {
        return Err(Error::Validation("no spot series for indicator panel".into()));
    }
    let calendar = &spots[0].dates;
    for s in spots {
        if &s.dates != calendar {
            return Err(Error::Validation(format!(
                "{}: spot series not aligned to the shared calendar",
                s.pair
            )));
        }
    }

    let mut ar_targets: Vec<String> = Vec::new();
    if !ndf_pairs.is_empty() {
        ar_targets.extend(ndf_pairs.iter().cloned());
        if !ar_targets.iter().any(|p| p == AR_PROXY_PAIR) {
            ar_targets.push(AR_PROXY_PAIR.to_string());
        }
        ar_targets.sort();
        ar_targets.dedup();
        for target in &ar_targets {
            if !spots.iter().any(|s| &s.pair == target) {
                return Err(Error::Config(format!(
                    "AR forecast target {target} is not among the spot series"
                )));
            }
        }
    }

    let mut columns = Vec::new();
    let mut notes = Vec::new();
    let push = |columns: &mut Vec<IndicatorColumn>, name: String, s: IndicatorSeries| {
        columns.push(IndicatorColumn {
            name,
            warmup: s.warmup,
            values: s.values,
        });
    };
    for spot in spots {
        let x = &spot.rates;
        let pair = &spot.pair;
        push(&mut columns, format!("{pair}_SMA_7"), sma(x, 7)?);
        push(&mut columns, format!("{pair}_SMA_21"), sma(x, 21)?);
        push(&mut columns, format!("{pair}_EMA_12"), ema(x, 12)?);
        push(&mut columns, format!("{pair}_EMA_26"), ema(x, 26)?);
        push(&mut columns, format!("{pair}_MACD_12_26"), macd(x)?);
        push(&mut columns, format!("{pair}_RSD_20"), rolling_std(x, 20)?);
        let (upper, lower) = bollinger(x)?;
        push(&mut columns, format!("{pair}_BB_UPPER_21_20"), upper);
        push(&mut columns, format!("{pair}_BB_LOWER_21_20"), lower);
        if ar_targets.iter().any(|t| t == pair) {
            let (series, fit) = ar_forecast(x, ar_order, ar_train_end)?;
            if fit.fallback {
                notes.push(format!("{pair}: AR forecast fell back to persistence"));
            }
            push(&mut columns, format!("{pair}_ARF_{ar_order}"), series);
        }
    }

    {
        let mut names: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != columns.len() {
            return Err(Error::Validation("duplicate indicator column names".into()));
        }
    }

    Ok((
        IndicatorPanel {
            dates: calendar.clone(),
            columns,
        },
        notes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn sma_small_example() {
        let s = sma(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(s.warmup, 1);
        assert!(s.values[0].is_nan());
        assert_eq!(&s.values[1..], &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn sma_constant_is_identity_after_warmup() {
        let s = sma(&[3.5; 40], 7).unwrap();
        assert!(s.values[6..].iter().all(|&v| v == 3.5));
    }

    #[test]
    fn sma_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..200).map(|_| rng.gen_range(1.0..10.0)).collect();
        let s = sma(&x, 21).unwrap();
        for t in 20..x.len() {
            let mean: f64 = x[t - 20..=t].iter().sum::<f64>() / 21.0;
            assert_close(s.values[t], mean, 1e-12);
        }
    }

    #[test]
    fn sma_rejects_short_series() {
        assert!(sma(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn ema_constant_is_fixed_point() {
        let s = ema(&[2.5; 30], 12).unwrap();
        assert!(s.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn ema_one_step() {
        // α = 2/(3+1) = 0.5: μ_2 = 0.5·3 + 0.5·1 = 2.
        let s = ema(&[1.0, 3.0], 3).unwrap();
        assert_eq!(s.values, vec![1.0, 2.0]);
    }

    #[test]
    fn ema_matches_unrolled_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..120).map(|_| rng.gen_range(1.0..10.0)).collect();
        let n = 12;
        let alpha = 2.0 / (n as f64 + 1.0);
        let s = ema(&x, n).unwrap();
        // Unrolling the recurrence: μ_t = α·Σ_{i=0..t−1} (1−α)^i x_{t−i}
        // + (1−α)^t x_0.
        for t in 0..x.len() {
            let mut acc = (1.0 - alpha).powi(t as i32) * x[0];
            for i in 0..t {
                acc += alpha * (1.0 - alpha).powi(i as i32) * x[t - i];
            }
            assert_close(s.values[t], acc, 1e-10);
        }
    }

    #[test]
    fn ema_stays_within_series_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..80).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s = ema(&x, 26).unwrap();
            assert!(s.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn macd_constant_is_zero_and_identity_holds() {
        let s = macd(&[7.0; 50]).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..90).map(|_| rng.gen_range(1.0..10.0)).collect();
        let m = macd(&x).unwrap();
        let fast = ema(&x, 12).unwrap();
        let slow = ema(&x, 26).unwrap();
        for t in 0..x.len() {
            assert_eq!(m.values[t], fast.values[t] - slow.values[t]);
        }
    }

    #[test]
    fn macd_ramp_turns_positive() {
        let x: Vec<f64> = (1..=100).map(|t| t as f64).collect();
        let m = macd(&x).unwrap();
        // The fast EMA tracks a rising ramp more closely than the slow one.
        assert!(m.values[30..].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rolling_std_examples() {
        let s = rolling_std(&[5.0; 30], 20).unwrap();
        assert!(s.values[19..].iter().all(|&v| v == 0.0));

        let s = rolling_std(&[0.0, 2.0, 0.0, 2.0], 2).unwrap();
        assert!(s.values[0].is_nan());
        assert_eq!(&s.values[1..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rolling_std_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..150).map(|_| rng.gen_range(100.0..200.0)).collect();
        let s = rolling_std(&x, 20).unwrap();
        for t in 19..x.len() {
            let win = &x[t - 19..=t];
            let mean: f64 = win.iter().sum::<f64>() / 20.0;
            let var: f64 = win.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
            assert_close(s.values[t], var.sqrt(), 1e-12);
        }
    }

    #[test]
    fn bollinger_properties() {
        // 4.25 is exactly representable, so the constant case is bit-exact.
        let (u, l) = bollinger(&[4.25; 40]).unwrap();
        for t in u.warmup..40 {
            assert_eq!(u.values[t], 4.25);
            assert_eq!(l.values[t], 4.25);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..100).map(|_| rng.gen_range(1.0..10.0)).collect();
        let (u, l) = bollinger(&x).unwrap();
        let rsd = rolling_std(&x, 20).unwrap();
        for t in u.warmup..x.len() {
            assert!(u.values[t] >= l.values[t]);
            assert_close(u.values[t] - l.values[t], 2.0 * rsd.values[t], 1e-12);
        }
    }

    #[test]
    fn ar_constant_series_forecasts_the_constant() {
        let x = vec![6.5; 120];
        let (s, fit) = ar_forecast(&x, 5, 80).unwrap();
        assert!(fit.fallback, "all-zero differences make the system singular");
        assert_eq!(s.warmup, 80);
        assert!(s.values[..80].iter().all(|v| v.is_nan()));
        assert!(s.values[80..].iter().all(|&v| v == 6.5));
    }

    #[test]
    fn ar_recovers_known_coefficient() {
        // Differences follow d_t = 0.8·d_{t−1} + ε with small noise.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5000;
        let mut d = vec![0.0f64; n];
        for t in 1..n {
            let eps: f64 = rng.gen_range(-0.01..0.01);
            d[t] = 0.8 * d[t - 1] + eps;
        }
        let mut x = vec![100.0f64];
        for t in 1..n {
            x.push(x[t - 1] + d[t]);
        }
        let (_, fit) = ar_forecast(&x, 1, n - 10).unwrap();
        assert!(!fit.fallback);
        assert!((fit.phi[0] - 0.8).abs() < 0.05, "phi = {}", fit.phi[0]);
    }

    #[test]
    fn ar_random_walk_is_near_persistence() {
        // With independent steps the fitted coefficients shrink toward zero,
        // so forecasts collapse to persistence. Step size 1e−5 keeps the
        // residual estimation noise well below the 1e−6 acceptance band.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 5000;
        let mut x = vec![6.0f64];
        for t in 1..n {
            x.push(x[t - 1] + rng.gen_range(-1e-5..1e-5));
        }
        let (s, fit) = ar_forecast(&x, 5, n - 200).unwrap();
        assert!(!fit.fallback);
        for t in (n - 200)..n {
            assert!((s.values[t] - x[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn ar_fit_never_reads_beyond_train_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x: Vec<f64> = Vec::new();
        let mut v = 5.0;
        for _ in 0..300 {
            v += rng.gen_range(-0.02..0.02);
            x.push(v);
        }
        let (_, fit_a) = ar_forecast(&x, 3, 200).unwrap();
        // Sentinel mutation: corrupt everything at and beyond train_end.
        let mut y = x.clone();
        for t in 200..y.len() {
            y[t] = 1e6 + t as f64;
        }
        let (_, fit_b) = ar_forecast(&y, 3, 200).unwrap();
        assert_eq!(fit_a, fit_b);
    }

    #[test]
    fn ar_requires_enough_history() {
        let x = vec![1.0; 30];
        assert!(ar_forecast(&x, 5, 20).is_err());
    }

    fn aligned_spots(pairs: &[&str], len: usize) -> Vec<SpotSeries> {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dates: Vec<NaiveDate> = (0..len)
            .map(|i| {
                NaiveDate::parse_from_str("2015-01-05", "%Y-%m-%d").unwrap()
                    + chrono::Days::new(i as u64)
            })
            .collect();
        pairs
            .iter()
            .map(|p| SpotSeries {
                pair: p.to_string(),
                dates: dates.clone(),
                rates: (0..len).map(|_| rng.gen_range(1.0..10.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn panel_counts_match_feature_budget() {
        // 64 pairs × 8 columns + 7 AR targets = 519.
        let mut names: Vec<String> = vec![
            "USDCNY", "USDIDR", "USDINR", "USDKRW", "USDPHP", "USDTWD", "USDMYR",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        for i in 0..57 {
            names.push(format!("PAIR{i:02}"));
        }
        let spots = aligned_spots(&names.iter().map(|s| s.as_str()).collect::<Vec<_>>(), 100);
        let ndf: Vec<String> = ["USDCNY", "USDIDR", "USDINR", "USDKRW", "USDPHP", "USDTWD"]
            .into_iter()
            .map(String::from)
            .collect();
        let (panel, _) = build_indicator_panel(&spots, &ndf, 5, 80).unwrap();
        assert_eq!(panel.columns.len(), 519);
    }

    #[test]
    fn panel_single_pair_no_ar_targets() {
        let spots = aligned_spots(&["EURUSD"], 60);
        let (panel, notes) = build_indicator_panel(&spots, &[], 5, 40).unwrap();
        assert_eq!(panel.columns.len(), COLUMNS_PER_PAIR);
        assert!(notes.is_empty());
    }

    #[test]
    fn panel_requires_ar_targets_present() {
        let spots = aligned_spots(&["USDCNY", "USDMYR"], 100);
        // USDKRW requested but absent.
        let err = build_indicator_panel(&spots, &["USDKRW".into()], 5, 80).unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Config);

        // Proxy pair absent.
        let spots = aligned_spots(&["USDCNY"], 100);
        let err = build_indicator_panel(&spots, &["USDCNY".into()], 5, 80).unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Config);
    }

    #[test]
    fn panel_names_are_deterministic_and_unique() {
        let spots = aligned_spots(&["USDCNY", "USDMYR"], 100);
        let ndf = vec!["USDCNY".to_string()];
        let (p1, _) = build_indicator_panel(&spots, &ndf, 5, 80).unwrap();
        let (p2, _) = build_indicator_panel(&spots, &ndf, 5, 80).unwrap();
        // Bitwise comparison: NaN warm-up markers defeat PartialEq.
        assert_eq!(p1.dates, p2.dates);
        assert_eq!(p1.columns.len(), p2.columns.len());
        for (a, b) in p1.columns.iter().zip(&p2.columns) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.warmup, b.warmup);
            assert!(a
                .values
                .iter()
                .zip(&b.values)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut names: Vec<&str> = p1.columns.iter().map(|c| c.name.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(p1.columns.iter().any(|c| c.name == "USDCNY_ARF_5"));
        assert!(p1.columns.iter().any(|c| c.name == "USDMYR_ARF_5"));
    }

    #[test]
    fn indicators_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..120).map(|_| rng.gen_range(1.0..10.0)).collect();
        let mut y = x.clone();
        for t in 60..y.len() {
            y[t] = rng.gen_range(100.0..200.0);
        }
        let cut = 60;
        let pairs: Vec<(IndicatorSeries, IndicatorSeries)> = vec![
            (sma(&x, 7).unwrap(), sma(&y, 7).unwrap()),
            (ema(&x, 26).unwrap(), ema(&y, 26).unwrap()),
            (macd(&x).unwrap(), macd(&y).unwrap()),
            (rolling_std(&x, 20).unwrap(), rolling_std(&y, 20).unwrap()),
        ];
        for (a, b) in pairs {
            for t in a.warmup..cut {
                assert_eq!(a.values[t], b.values[t], "position {t} depends on the future");
            }
        }
    }
}
