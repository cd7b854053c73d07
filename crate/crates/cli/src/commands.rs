//! One function per subcommand. Each validates the effective config,
//! checks its upstream artifacts exist (naming the command that produces
//! them), delegates to the library, writes outputs inside the output
//! directory only, and records a manifest beside every file it writes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use tenorsel::backtest::{
    label_policy, momentum1, momentum90, run_backtest, write_report_csv, BacktestReport,
};
use tenorsel::error::{Error, Result};
use tenorsel::explain::{export_latents, input_gradients};
use tenorsel::indicators::build_indicator_panel;
use tenorsel::ingest::{
    aggregate_volumes, align_panel, align_spots, parse_ndf_records, parse_spot_csv,
    read_cube_csv, read_panel, rolling_normalize, write_cube_csv, write_ndf_csv,
    write_panel_csv, write_panel_meta, write_spot_csv, PanelMeta, SpotSeries, VolumeCube,
};
use tenorsel::labels::{
    expert_labels, optimal_labels, oracle_labels, read_labels_csv, window_dataset,
    write_labels_csv, LabelKind, LabelSeries, TenorSet, WindowedDataset,
};
use tenorsel::synth::generate;
use tenorsel::training::{dataset_accuracy, train};
use tenorsel::wattnet::{predict_tenor, ModelParams};

use crate::config::{artifact_path, RunConfig};
use crate::manifest::write_manifest;

/// Which decision source a backtest evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Policy {
    Model,
    Expert,
    Optimal,
    Oracle,
    Momentum1,
    Momentum90,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Model => "model",
            Policy::Expert => "expert",
            Policy::Optimal => "optimal",
            Policy::Oracle => "oracle",
            Policy::Momentum1 => "momentum1",
            Policy::Momentum90 => "momentum90",
        }
    }
}

/// Error for a missing upstream artifact, naming the producing command.
fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Validation(format!(
            "missing artifact {}; run `tenorsel {producer}` first",
            path.display()
        )));
    }
    Ok(())
}

fn resolve(cfg_name: &str, out_dir: &Path) -> Result<PathBuf> {
    artifact_path(out_dir, cfg_name)
}

/// Aligned spot series plus a guard that they share one calendar.
fn load_aligned_spots(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<SpotSeries>> {
    let path = resolve(&cfg.paths.aligned_spot_csv, out_dir)?;
    require(&path, "ingest")?;
    let spots = parse_spot_csv(&path)?;
    let calendar = &spots[0].dates;
    for s in &spots {
        if &s.dates != calendar {
            return Err(Error::Validation(format!(
                "{}: aligned spot file has mismatched calendars; re-run `tenorsel ingest`",
                s.pair
            )));
        }
    }
    Ok(spots)
}

fn target_spot<'a>(cfg: &RunConfig, spots: &'a [SpotSeries]) -> Result<&'a SpotSeries> {
    spots
        .iter()
        .find(|s| s.pair == cfg.market.pair)
        .ok_or_else(|| {
            Error::Validation(format!(
                "target pair {} not present in the aligned spot data",
                cfg.market.pair
            ))
        })
}

fn load_labels(cfg: &RunConfig, out_dir: &Path, kind: LabelKind) -> Result<LabelSeries> {
    let path = resolve(cfg.labels_file(kind), out_dir)?;
    require(&path, "label")?;
    let series = read_labels_csv(&path)?;
    if series.kind != kind {
        return Err(Error::Validation(format!(
            "{} holds {} labels, expected {}",
            path.display(),
            series.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(series)
}

fn load_checkpoint(cfg: &RunConfig, out_dir: &Path) -> Result<ModelParams> {
    let path = resolve(&cfg.paths.checkpoint, out_dir)?;
    require(&path, "train")?;
    ModelParams::load(&path)
}

/// Read the normalized panel and check the model width against it with an
/// actionable message.
fn load_panel_checked(
    cfg: &RunConfig,
    out_dir: &Path,
    expect_width: Option<usize>,
) -> Result<(tenorsel::AlignedPanel, PanelMeta)> {
    let csv = resolve(&cfg.paths.panel_csv, out_dir)?;
    let meta = resolve(&cfg.paths.panel_meta, out_dir)?;
    require(&csv, "features")?;
    require(&meta, "features")?;
    let (panel, meta) = read_panel(&csv, &meta)?;
    if let Some(w) = expect_width {
        if panel.n_cols() != w {
            return Err(Error::Config(format!(
                "panel has {} feature columns but model.input_width = {w}; \
                 set model.input_width = {} in the config",
                panel.n_cols(),
                panel.n_cols()
            )));
        }
    }
    Ok((panel, meta))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("JSON serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// `synth`: write a seeded synthetic market (spot CSV + NDF record CSV).
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let market = generate(&cfg.synth)?;

    let spot_path = resolve(&cfg.paths.spot_csv, out_dir)?;
    write_spot_csv(&spot_path, &market.spots)?;
    write_manifest("synth", &[], &config_sha, &[], &spot_path)?;

    let ndf_path = resolve(&cfg.paths.ndf_csv, out_dir)?;
    write_ndf_csv(&ndf_path, &market.records)?;
    write_manifest("synth", &[], &config_sha, &[], &ndf_path)?;

    println!(
        "synth: {} trading days ({}..{}), {} pairs, {} NDF records -> {}, {}",
        market.calendar.len(),
        market.calendar[0],
        market.calendar[market.calendar.len() - 1],
        market.spots.len(),
        market.records.len(),
        spot_path.display(),
        ndf_path.display()
    );
    Ok(())
}

/// `ingest`: align raw spots onto one calendar and aggregate NDF volume
/// cubes for every configured pair.
pub fn cmd_ingest(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let spot_path = resolve(&cfg.paths.spot_csv, out_dir)?;
    let ndf_path = resolve(&cfg.paths.ndf_csv, out_dir)?;
    require(&spot_path, "synth (or provide real data)")?;
    require(&ndf_path, "synth (or provide real data)")?;

    let raw = parse_spot_csv(&spot_path)?;
    let aligned = align_spots(&raw, cfg.features.max_fill_days)?;
    let calendar = aligned[0].dates.clone();
    let aligned_path = resolve(&cfg.paths.aligned_spot_csv, out_dir)?;
    write_spot_csv(&aligned_path, &aligned)?;
    write_manifest("ingest", &[], &config_sha, &[&spot_path], &aligned_path)?;
    println!(
        "ingest: {} pairs aligned onto {} trading days",
        aligned.len(),
        calendar.len()
    );

    let records = parse_ndf_records(&ndf_path)?;
    for pair in &cfg.market.ndf_pairs {
        if !aligned.iter().any(|s| &s.pair == pair) {
            return Err(Error::Validation(format!(
                "NDF pair {pair} has no spot series in {}",
                spot_path.display()
            )));
        }
        if !records.iter().any(|r| &r.pair == pair) {
            return Err(Error::Validation(format!(
                "no NDF records for pair {pair} in {}",
                ndf_path.display()
            )));
        }
        let (cube, stats) = aggregate_volumes(&records, pair, &calendar, cfg.tenor.a_max)?;
        let cube_path = resolve(&cfg.volumes_file(pair), out_dir)?;
        write_cube_csv(&cube_path, &cube)?;
        write_manifest(
            "ingest",
            &[("pair", pair.clone())],
            &config_sha,
            &[&ndf_path, &aligned_path],
            &cube_path,
        )?;
        let pair_records = records.iter().filter(|r| &r.pair == pair).count();
        println!(
            "ingest: {pair} volume cube {} days x {} tenors ({} records kept, {} long-tenor and {} off-calendar dropped)",
            cube.dates.len(),
            cube.a_max,
            pair_records - stats.dropped_long_tenor - stats.dropped_off_calendar,
            stats.dropped_long_tenor,
            stats.dropped_off_calendar
        );
    }
    Ok(())
}

/// `features`: indicators + AR forecasts + volume columns, aligned and
/// rolling-normalized into the model's input panel.
pub fn cmd_features(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let spots = load_aligned_spots(cfg, out_dir)?;
    let calendar = spots[0].dates.clone();

    let mut cubes: Vec<VolumeCube> = Vec::new();
    let mut input_paths: Vec<PathBuf> =
        vec![resolve(&cfg.paths.aligned_spot_csv, out_dir)?];
    for pair in &cfg.market.ndf_pairs {
        let cube_path = resolve(&cfg.volumes_file(pair), out_dir)?;
        require(&cube_path, "ingest")?;
        cubes.push(read_cube_csv(&cube_path, pair)?);
        input_paths.push(cube_path);
    }

    // The AR forecaster fits strictly before the training period, so its
    // frozen coefficients leak nothing into training or test; the fit era
    // is then consumed as panel warm-up.
    let ar_train_end = calendar.iter().filter(|d| **d < cfg.market.train_start).count();
    let (indicators, notes) = build_indicator_panel(
        &spots,
        &cfg.market.ndf_pairs,
        cfg.features.ar_order,
        ar_train_end,
    )?;
    let panel = align_panel(&spots, &indicators, &cubes)?;
    let dropped_warmup = calendar.len() - panel.n_rows();
    let (normalized, _stats) = rolling_normalize(&panel, cfg.features.normalize_window)?;
    let dropped_norm = panel.n_rows() - normalized.n_rows();

    let meta = PanelMeta {
        columns: normalized.columns.clone(),
        normalize_window: Some(cfg.features.normalize_window),
        dropped_warmup_rows: dropped_warmup,
        dropped_normalize_rows: dropped_norm,
        normalize_all_columns: true,
        forward_fill_limit: cfg.features.max_fill_days as usize,
        notes,
    };

    let panel_path = resolve(&cfg.paths.panel_csv, out_dir)?;
    let meta_path = resolve(&cfg.paths.panel_meta, out_dir)?;
    write_panel_csv(&panel_path, &normalized)?;
    write_panel_meta(&meta_path, &meta)?;
    let inputs: Vec<&Path> = input_paths.iter().map(|p| p.as_path()).collect();
    write_manifest("features", &[], &config_sha, &inputs, &panel_path)?;
    write_manifest("features", &[], &config_sha, &inputs, &meta_path)?;

    println!(
        "features: panel {} rows x {} columns ({} warm-up + {} normalization rows dropped)",
        normalized.n_rows(),
        normalized.n_cols(),
        dropped_warmup,
        dropped_norm
    );
    if cfg.model.input_width != normalized.n_cols() {
        println!(
            "features: note — model.input_width = {} does not match this panel; \
             set it to {} before `tenorsel train`",
            cfg.model.input_width,
            normalized.n_cols()
        );
    }
    Ok(())
}

/// `label`: optimal, expert, and oracle tenor streams for the target pair.
pub fn cmd_label(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let spots = load_aligned_spots(cfg, out_dir)?;
    let spot = target_spot(cfg, &spots)?;
    let aligned_path = resolve(&cfg.paths.aligned_spot_csv, out_dir)?;
    let cube_path = resolve(&cfg.volumes_file(&cfg.market.pair), out_dir)?;
    require(&cube_path, "ingest")?;
    let cube = read_cube_csv(&cube_path, &cfg.market.pair)?;
    let tenors = TenorSet::new(cfg.tenor.a_max)?;

    let streams = [
        (optimal_labels(spot, tenors)?, &cfg.paths.labels_optimal, &aligned_path),
        (expert_labels(&cube)?, &cfg.paths.labels_expert, &cube_path),
        (oracle_labels(spot, tenors)?, &cfg.paths.labels_oracle, &aligned_path),
    ];
    for (series, name, input) in &streams {
        let path = resolve(name, out_dir)?;
        write_labels_csv(&path, series)?;
        write_manifest("label", &[], &config_sha, &[input], &path)?;
        println!(
            "label: {} -> {} days, {} no-trade",
            series.kind.as_str(),
            series.labels.len(),
            series.count_class(0)
        );
    }
    Ok(())
}

/// Windowed dataset for the configured supervising label kind.
fn build_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<WindowedDataset> {
    let (panel, _meta) = load_panel_checked(cfg, out_dir, Some(cfg.model.input_width))?;
    let labels = load_labels(cfg, out_dir, cfg.label_kind()?)?;
    window_dataset(Arc::new(panel), &labels, cfg.window.t_len)
}

/// `train`: imitation-learn the supervising labels on pre-split data.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let dataset = build_dataset(cfg, out_dir)?;
    let (train_ds, test_ds) = dataset.split_at(cfg.market.split_date);
    if train_ds.is_empty() {
        return Err(Error::Validation(format!(
            "no training samples before split date {}",
            cfg.market.split_date
        )));
    }
    println!(
        "train: {} train / {} test samples of {} features x {} days ({} labels)",
        train_ds.len(),
        test_ds.len(),
        dataset.n_features(),
        dataset.t_len,
        cfg.dataset.label_kind
    );

    let mut tc = cfg.training.clone();
    // Belt and braces: the trainer re-checks that no sample crosses the
    // split even if the config carries no explicit fence.
    if tc.date_fence.is_none() {
        tc.date_fence = Some(cfg.market.split_date);
    }
    let (params, report) = train(&cfg.model, &train_ds, &tc)?;

    let ckpt_path = resolve(&cfg.paths.checkpoint, out_dir)?;
    params.save(&ckpt_path)?;
    let report_path = resolve(&cfg.paths.train_report, out_dir)?;
    write_json(&report_path, &report)?;

    let inputs = [
        resolve(&cfg.paths.panel_csv, out_dir)?,
        resolve(&cfg.paths.panel_meta, out_dir)?,
        resolve(cfg.labels_file(cfg.label_kind()?), out_dir)?,
    ];
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest("train", &[], &config_sha, &input_refs, &ckpt_path)?;
    write_manifest("train", &[], &config_sha, &input_refs, &report_path)?;

    let train_acc = dataset_accuracy(&params, &train_ds)?;
    println!(
        "train: {} epochs ({}), best loss {:.6} at epoch {}, final lr {:.3e}, train acc {:.2}% [{:.1}s]",
        report.epochs_run,
        serde_json::to_value(&report.stop_reason)
            .map(|v| v.as_str().unwrap_or("?").to_string())
            .unwrap_or_else(|_| "?".into()),
        report.best_loss,
        report.best_epoch,
        report.final_lr,
        train_acc,
        report.wall_clock_secs
    );
    println!("train: checkpoint -> {}", ckpt_path.display());
    Ok(())
}

/// `backtest`: score one policy on the post-split period.
pub fn cmd_backtest(cfg: &RunConfig, out_dir: &Path, policy: Policy) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let (panel, _meta) = load_panel_checked(
        cfg,
        out_dir,
        (policy == Policy::Model).then_some(cfg.model.input_width),
    )?;
    let spots = load_aligned_spots(cfg, out_dir)?;
    let spot = target_spot(cfg, &spots)?;
    let tenors = TenorSet::new(cfg.tenor.a_max)?;
    let t_len = cfg.window.t_len;

    let mut inputs: Vec<PathBuf> = vec![
        resolve(&cfg.paths.panel_csv, out_dir)?,
        resolve(&cfg.paths.panel_meta, out_dir)?,
        resolve(&cfg.paths.aligned_spot_csv, out_dir)?,
    ];

    // Every policy is evaluated on the identical test-day set (full window
    // history and an observable outcome), so ROI columns are comparable.
    let report: BacktestReport = match policy {
        Policy::Model => {
            let params = load_checkpoint(cfg, out_dir)?;
            inputs.push(resolve(&cfg.paths.checkpoint, out_dir)?);
            let model_policy = |date: NaiveDate| -> Result<usize> {
                let row = panel.row_of(date).ok_or_else(|| {
                    Error::Compute(format!("panel has no row for test day {date}"))
                })?;
                predict_tenor(&params, panel.rows(row + 1 - t_len, row + 1))
            };
            run_backtest(
                "model",
                model_policy,
                &panel,
                spot,
                tenors,
                cfg.market.split_date,
                t_len,
            )?
        }
        Policy::Expert | Policy::Optimal | Policy::Oracle => {
            let kind = match policy {
                Policy::Expert => LabelKind::Expert,
                Policy::Optimal => LabelKind::Optimal,
                _ => LabelKind::Oracle,
            };
            let series = load_labels(cfg, out_dir, kind)?;
            inputs.push(resolve(cfg.labels_file(kind), out_dir)?);
            run_backtest(
                policy.as_str(),
                label_policy(&series),
                &panel,
                spot,
                tenors,
                cfg.market.split_date,
                t_len,
            )?
        }
        Policy::Momentum1 => {
            let expert = load_labels(cfg, out_dir, LabelKind::Expert)?;
            inputs.push(resolve(cfg.labels_file(LabelKind::Expert), out_dir)?);
            let trace = momentum1(&expert)?;
            run_backtest(
                &trace.source.clone(),
                trace.policy(),
                &panel,
                spot,
                tenors,
                cfg.market.split_date,
                t_len,
            )?
        }
        Policy::Momentum90 => {
            let trace = momentum90(spot, tenors)?;
            run_backtest(
                &trace.source.clone(),
                trace.policy(),
                &panel,
                spot,
                tenors,
                cfg.market.split_date,
                t_len,
            )?
        }
    };

    let base = format!("{}_{}", cfg.paths.backtest_prefix, policy.as_str());
    let csv_path = resolve(&format!("{base}.csv"), out_dir)?;
    let json_path = resolve(&format!("{base}.json"), out_dir)?;
    write_report_csv(&csv_path, &report)?;
    write_json(&json_path, &report)?;
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    let args = [("policy", policy.as_str().to_string())];
    write_manifest("backtest", &args, &config_sha, &input_refs, &csv_path)?;
    write_manifest("backtest", &args, &config_sha, &input_refs, &json_path)?;

    println!(
        "backtest[{}]: {} days from {} ({} trades, {} end / {} history days excluded)",
        report.source,
        report.days,
        report.split_date,
        report.trade_count,
        report.excluded_end_days,
        report.excluded_history_days
    );
    println!(
        "backtest[{}]: ROI {:.4}%  opt.acc {:.2}%  nonneg.acc {:.2}%",
        report.source, report.total_roi, report.optimal_acc, report.nonneg_acc
    );
    Ok(())
}

/// `explain`: per-feature gradient importances over post-split samples of
/// one target class.
pub fn cmd_explain(
    cfg: &RunConfig,
    out_dir: &Path,
    class: Option<usize>,
    top_k: Option<usize>,
) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let params = load_checkpoint(cfg, out_dir)?;
    let dataset = build_dataset(cfg, out_dir)?;
    let (_, test_ds) = dataset.split_at(cfg.market.split_date);
    if test_ds.is_empty() {
        return Err(Error::Validation(format!(
            "no samples on or after split date {}",
            cfg.market.split_date
        )));
    }

    // Default target: the most frequent label in the test period (ties
    // toward the smaller class).
    let target = match class {
        Some(c) => c,
        None => {
            let mut counts = vec![0usize; cfg.model.n_classes];
            for s in &test_ds.samples {
                if s.label < counts.len() {
                    counts[s.label] += 1;
                }
            }
            counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap_or(0)
        }
    };
    let sample_idx: Vec<usize> = (0..test_ds.len())
        .filter(|&i| test_ds.samples[i].label == target)
        .collect();
    if sample_idx.is_empty() {
        return Err(Error::Validation(format!(
            "no test samples with {} label {target}; pick --class among observed labels",
            cfg.dataset.label_kind
        )));
    }
    let windows: Vec<&[f64]> = sample_idx.iter().map(|&i| test_ds.window(i)).collect();
    let report = input_gradients(&params, &windows, target)?;

    let k = top_k.unwrap_or(cfg.explain.top_k).min(report.importance.len());
    let columns = &test_ds.panel().columns;
    let top: Vec<serde_json::Value> = report
        .top_k(k)
        .into_iter()
        .map(|(j, g)| {
            serde_json::json!({
                "feature": j,
                "column": columns[j].name,
                "importance": g,
            })
        })
        .collect();
    let out = serde_json::json!({
        "target_class": report.target_class,
        "n_samples": report.n_samples,
        "label_kind": cfg.dataset.label_kind,
        "top": top,
        "importance": report.importance,
        "ranking": report.ranking,
    });
    let path = resolve(&cfg.paths.grad_report, out_dir)?;
    write_json(&path, &out)?;

    let inputs = [
        resolve(&cfg.paths.panel_csv, out_dir)?,
        resolve(&cfg.paths.panel_meta, out_dir)?,
        resolve(cfg.labels_file(cfg.label_kind()?), out_dir)?,
        resolve(&cfg.paths.checkpoint, out_dir)?,
    ];
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    let args = [("class", target.to_string()), ("top_k", k.to_string())];
    write_manifest("explain", &args, &config_sha, &input_refs, &path)?;

    println!(
        "explain: class {} over {} test samples -> {}",
        target,
        report.n_samples,
        path.display()
    );
    for (j, g) in report.top_k(k) {
        println!("explain:   {:>10.4e}  {}", g, columns[j].name);
    }
    Ok(())
}

/// `export-latents`: final-block latent vectors for every sample, CSV for
/// external embedding tools.
pub fn cmd_export_latents(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let config_sha = cfg.sha256()?;
    let params = load_checkpoint(cfg, out_dir)?;
    let dataset = build_dataset(cfg, out_dir)?;
    let windows: Vec<&[f64]> = (0..dataset.len()).map(|i| dataset.window(i)).collect();
    let dates: Vec<NaiveDate> = dataset.samples.iter().map(|s| s.date).collect();
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();

    let path = resolve(&cfg.paths.latents_csv, out_dir)?;
    let rows = export_latents(&params, &windows, &dates, &labels, &path)?;

    let inputs = [
        resolve(&cfg.paths.panel_csv, out_dir)?,
        resolve(&cfg.paths.panel_meta, out_dir)?,
        resolve(cfg.labels_file(cfg.label_kind()?), out_dir)?,
        resolve(&cfg.paths.checkpoint, out_dir)?,
    ];
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest("export-latents", &[], &config_sha, &input_refs, &path)?;

    println!(
        "export-latents: {} rows x {} latent dims -> {}",
        rows.len(),
        rows.first().map(|r| r.latent.len()).unwrap_or(0),
        path.display()
    );
    Ok(())
}
