//! `tenorsel` — run the NDF tenor-selection pipeline stage by stage.
//!
//! Every command reads one TOML config (`--config`, optional: built-in
//! defaults form a self-contained desk-scale profile), resolves artifact
//! names inside `--out-dir`, and writes a provenance manifest beside each
//! output. Exit codes encode the failure category: 2 configuration,
//! 3 data (parse/validation), 4 computation, 5 I/O.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tenorsel::error::{Error, ErrorCategory, Result};

use commands::Policy;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "tenorsel",
    version,
    about = "NDF tenor selection: synthetic markets, feature panels, imitation training, backtests"
)]
struct Cli {
    /// TOML run configuration; defaults form a self-contained desk-scale
    /// profile.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the synth and training seeds in one flag.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic market (spot + NDF record CSVs).
    Synth {
        /// Trading days to generate (>= 300).
        #[arg(long)]
        days: Option<usize>,
        /// Number of spot pairs from the catalog.
        #[arg(long)]
        n_pairs: Option<usize>,
        /// Leading pairs that also get NDF records.
        #[arg(long)]
        n_ndf_pairs: Option<usize>,
    },
    /// Align spot series onto one calendar and aggregate NDF volume cubes.
    Ingest,
    /// Build the indicator + volume feature panel and normalize it.
    Features,
    /// Write optimal, expert, and oracle label streams.
    Label,
    /// Train the model on pre-split windows of the supervising labels.
    Train {
        /// Override training.max_epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Log one line per epoch.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a policy on the post-split period.
    Backtest {
        /// Decision source to score.
        #[arg(long, value_enum, default_value = "model")]
        policy: Policy,
    },
    /// Gradient feature attributions for one target class.
    Explain {
        /// Target tenor class (default: most frequent post-split label).
        #[arg(long)]
        class: Option<usize>,
        /// How many features to list in the report.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Export final-block latent vectors for every sample.
    ExportLatents,
}

/// flag > file > default: load the file (or defaults), then overlay the
/// explicitly passed flags.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.training.seed = seed;
    }
    match &cli.command {
        Command::Synth {
            days,
            n_pairs,
            n_ndf_pairs,
        } => {
            if let Some(d) = days {
                cfg.synth.days = *d;
            }
            if let Some(n) = n_pairs {
                cfg.synth.n_pairs = *n;
            }
            if let Some(n) = n_ndf_pairs {
                cfg.synth.n_ndf_pairs = *n;
            }
        }
        Command::Train {
            max_epochs,
            verbose,
        } => {
            if let Some(e) = max_epochs {
                cfg.training.max_epochs = *e;
            }
            if *verbose {
                cfg.training.verbose = true;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| Error::io(cli.out_dir.display().to_string(), e))?;
    let out_dir = cli.out_dir.as_path();
    match &cli.command {
        Command::Synth { .. } => commands::cmd_synth(&cfg, out_dir),
        Command::Ingest => commands::cmd_ingest(&cfg, out_dir),
        Command::Features => commands::cmd_features(&cfg, out_dir),
        Command::Label => commands::cmd_label(&cfg, out_dir),
        Command::Train { .. } => commands::cmd_train(&cfg, out_dir),
        Command::Backtest { policy } => commands::cmd_backtest(&cfg, out_dir, *policy),
        Command::Explain { class, top_k } => {
            commands::cmd_explain(&cfg, out_dir, *class, *top_k)
        }
        Command::ExportLatents => commands::cmd_export_latents(&cfg, out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Compute => 4,
                ErrorCategory::Io => 5,
            };
            ExitCode::from(code)
        }
    }
}
