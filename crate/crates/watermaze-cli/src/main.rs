//! Command-line harness: train Q-network agents in the circular water maze,
//! evaluate trained checkpoints, and export smoothed training curves.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use watermaze::env::{sample_platform, Vec2};
use watermaze::harness::{cmd_eval, cmd_train, export_curves, parse_config_file, RunConfig, DOMAIN_PLATFORM};
use watermaze::seeding;

#[derive(Parser)]
#[command(name = "watermaze", version, about = "Transformer Q-learning in a circular water maze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per (sequence length, run index) pair and write
    /// metrics, checkpoints, and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the greedy policy and report success
    /// rate, step statistics, collisions, and oscillation behavior.
    Eval(EvalArgs),
    /// Aggregate metrics CSVs into smoothed, across-run curves.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override: number of training episodes per run.
    #[arg(long)]
    episodes: Option<usize>,
    /// Override: comma-separated sequence lengths, e.g. 5,45,75.
    #[arg(long, value_delimiter = ',')]
    seq_len: Option<Vec<usize>>,
    /// Override: independent runs per sequence length.
    #[arg(long)]
    runs: Option<usize>,
    /// Override: base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of greedy evaluation episodes.
    #[arg(long)]
    episodes: usize,
    /// Environment configuration file; defaults match training defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Platform center `X,Y` (from the training manifest). Without it, a
    /// platform is sampled deterministically from the evaluation seed.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    platform: Option<Vec<f64>>,
    /// Evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for per-episode trajectory files.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Report file; the report always also prints to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Directory containing metrics_*.csv files.
    #[arg(long = "in")]
    input: PathBuf,
    /// EMA smoothing constant in (0, 1].
    #[arg(long)]
    alpha: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            parse_config_file(p).map_err(|e| anyhow!("{e}")).with_context(|| {
                format!("reading config {}", p.display())
            })
        }
        None => Ok(RunConfig::default()),
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let mut cfg = load_config(&args.config)?;
            if let Some(episodes) = args.episodes {
                cfg.episodes = episodes;
            }
            if let Some(seq) = args.seq_len {
                cfg.seq_lens = seq;
            }
            if let Some(runs) = args.runs {
                cfg.runs = runs;
            }
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(out) = args.out {
                cfg.out_dir = out;
            }
            let artifacts = cmd_train(&cfg).map_err(|e| anyhow!("{e}"))?;
            println!(
                "wrote {} metrics files, {} checkpoints, manifest {}",
                artifacts.metrics.len(),
                artifacts.checkpoints.len(),
                artifacts.manifest.display()
            );
            Ok(())
        }
        Command::Eval(args) => {
            let cfg = load_config(&args.config)?;
            let env_cfg = cfg.env_config();
            let platform = match &args.platform {
                Some(xy) if xy.len() == 2 => Vec2::new(xy[0], xy[1]),
                Some(xy) => {
                    return Err(anyhow!(
                        "--platform takes exactly two numbers, got {}",
                        xy.len()
                    ))
                }
                None => sample_platform(seeding::sub_seed(args.seed, DOMAIN_PLATFORM), &env_cfg),
            };
            cmd_eval(
                &args.checkpoint,
                &env_cfg,
                platform,
                args.episodes,
                args.seed,
                cfg.oscillation_window,
                args.trajectories.as_deref(),
                args.report.as_deref(),
            )
            .map_err(|e| anyhow!("{e}"))?;
            Ok(())
        }
        Command::Curves(args) => {
            let rows =
                export_curves(&args.input, args.alpha, &args.out).map_err(|e| anyhow!("{e}"))?;
            println!("wrote {} curve rows to {}", rows.len(), args.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
