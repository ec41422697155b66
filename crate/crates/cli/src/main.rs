//! `brimpr`: pretraining, adaptation runs, theorem verification and self-checks.
//!
//! Results go to standard output as JSON, errors to standard error. Exit
//! codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
//! error, 4 numerical failure (including a failed check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use brimpr_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "brimpr", version, about = "Prompt-based multimodal test-time adaptation lab", after_long_help = config::key_table())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the commands that use a [`RunConfig`].
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed. Without it the config value is used, then BRIMPR_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SigmaKind {
    Identity,
    RandomPsd,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the source model on clean task data and write a checkpoint with its statistics bank.
    #[command(after_long_help = config::key_table())]
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to write [default: config key `checkpoint`].
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run online prompt adaptation over a generated test stream.
    #[command(after_long_help = config::key_table())]
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Source checkpoint [default: config key `checkpoint`].
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Detect per-modality shifts and re-initialize that modality's prompts.
        #[arg(long)]
        continual: bool,
        /// Predict only; prompts stay as loaded.
        #[arg(long)]
        no_adapt: bool,
        /// Stop updating after this many batches [default: never].
        #[arg(long, value_name = "N")]
        max_adapt_batches: Option<usize>,
        /// Per-batch metrics CSV [default: config key `metrics`].
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
    },
    /// Compare Monte-Carlo covariance-estimation errors with their closed forms.
    VerifyTheorem {
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 11)]
        n: usize,
        /// At least 1000.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = SigmaKind::Identity)]
        sigma: SigmaKind,
        /// Sampling seed [default: BRIMPR_SEED, then 0].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every loss gradient on the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value_t = brimpr_core::adapt::GRADCHECK_STEP)]
        step: f64,
        #[arg(long, default_value_t = brimpr_core::adapt::GRADCHECK_TOL)]
        tol: f64,
        /// Add this to one analytic gradient entry before comparing (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Write train, test and stream splits of the task to a dataset dump.
    #[command(after_long_help = config::key_table())]
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dump to write [default: config key `data`].
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var("BRIMPR_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("BRIMPR_SEED: cannot parse {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    let mut seeded = false;
    if let Some(p) = &args.config {
        seeded |= cfg.apply_file(p)?.iter().any(|k| k == "seed");
    }
    cfg.apply_overrides(&args.set)?;
    seeded |= args.set.iter().any(|s| s.split('=').next().map(str::trim) == Some("seed"));
    if let Some(s) = args.seed {
        cfg.seed = s;
    } else if !seeded {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Checkpoint(_) | Error::Io(_) => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> Result<(serde_json::Value, bool), Error> {
    match cli.command {
        Command::Pretrain { cfg, out } => {
            let c = load_config(&cfg)?;
            commands::pretrain(&c, out.as_deref().unwrap_or(&c.checkpoint))
        }
        Command::Adapt { cfg, checkpoint, continual, no_adapt, max_adapt_batches, metrics } => {
            let c = load_config(&cfg)?;
            let opts = commands::AdaptOptions {
                checkpoint: checkpoint.unwrap_or_else(|| c.checkpoint.clone()),
                continual,
                no_adapt,
                max_adapt_batches,
                metrics: metrics.or_else(|| c.metrics.clone()),
            };
            commands::adapt(&c, &opts)
        }
        Command::VerifyTheorem { d, n, trials, sigma, seed } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            commands::verify_theorem(d, n, trials, sigma == SigmaKind::RandomPsd, seed)
        }
        Command::Gradcheck { seed, batch, step, tol, corrupt } => commands::gradcheck(seed, batch, step, tol, corrupt),
        Command::GenData { cfg, out } => {
            let c = load_config(&cfg)?;
            commands::gen_data(&c, out.as_deref().unwrap_or(&c.data))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((report, pass)) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
