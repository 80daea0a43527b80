//! Command-line frontend for the forecasting library.
//!
//! Verbs: `gen-toy`, `train`, `eval`, `sample`, `audit`. Every verb is
//! deterministic given its configuration and seed, writes its resolved
//! configuration next to its outputs, and overwrites identically on
//! re-runs (timings excepted, and those live only in `train_report.json`).
//!
//! Exit codes: 0 success, 2 validation error (bad arguments, malformed
//! config or data), 3 numerical failure, 4 audit failure. Verbosity is
//! controlled by the `MARCONFLOW_LOG` environment variable (`error`,
//! `warn`, `info`, `debug`, `trace`).

mod audit;
mod config;
mod data;
mod eval;
mod gen_toy;
mod sample;
mod svg;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use marconflow::variants::VariantSpec;
use marconflow::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "marconflow", version, about = "Mixture-of-separable-flows forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in toy dataset as JSONL.
    GenToy {
        /// Which dataset: blast or circle.
        name: String,
        /// Number of instances.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model per the run configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a run's last.mcfw instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metrics for a checkpoint on a data file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instance file (defaults to the config's dataset.test).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated metric list (defaults to the config's).
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Draw joint predictive samples for every instance in a file.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instance file (defaults to the config's dataset.test).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Draws per instance.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Verify marginalization consistency on a data file, with overlays.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to audit.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instance file (defaults to the config's dataset.test).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Grid points per variable (defaults to the config's).
        #[arg(long)]
        grid: Option<usize>,
    },
}

/// Flags shared by the config-driven verbs. Each overrides the matching
/// config field; the resolved configuration records the outcome.
#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML or JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the model variant (full, gmm, isotropic, uniform, single,
    /// or a +-joined combination).
    #[arg(long)]
    variant: Option<String>,
    /// Override the worker-thread count (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        if let Some(variant) = &self.variant {
            cfg.model.variant = VariantSpec::parse(variant)?;
            cfg.model.validate()?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("MARCONFLOW_LOG", "info"),
    )
    .format_timestamp(None)
    .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(match err {
                Error::Contract(_) | Error::Validation(_) | Error::Io(_) => 2,
                Error::Domain(_) | Error::Numerical(_) => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenToy { name, n, seed, out } => {
            gen_toy::run(&name, n, seed, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            train::run(&cfg, resume.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { common, checkpoint, data, metrics } => {
            let mut cfg = common.resolve()?;
            if let Some(list) = metrics {
                cfg.eval.metrics = list.split(',').map(|m| m.trim().to_string()).collect();
            }
            eval::run(&cfg, &checkpoint, data.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample { common, checkpoint, data, n } => {
            let cfg = common.resolve()?;
            sample::run(&cfg, &checkpoint, data.as_deref(), n)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit { common, checkpoint, data, grid } => {
            let mut cfg = common.resolve()?;
            if let Some(points) = grid {
                cfg.audit.grid_points = points;
            }
            if audit::run(&cfg, &checkpoint, data.as_deref())? {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(4))
            }
        }
    }
}
