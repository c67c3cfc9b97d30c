//! `khn` — train, evaluate, gradient-check, and describe datasets for
//! kernel-conditioned hypernetwork models.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error,
//! 5 incompatible checkpoint.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "khn", version, about = "Few-shot classification with kernel-conditioned hypernetworks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodic training and write a checkpoint plus metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out episodes.
    Eval(EvalArgs),
    /// Compare tape gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic dataset description for a config.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory for checkpoint, metrics, and resolved config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `khn train`.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Number of evaluation episodes.
    #[arg(long, value_name = "N", default_value_t = 200)]
    episodes: usize,
    /// Tune a clone of the model on each task's support set first.
    #[arg(long, value_name = "on|off", default_value = "off")]
    finetune: Toggle,
    /// Override the evaluation seed (defaults to the checkpoint's).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Where to write the evaluation summary (defaults next to the
    /// checkpoint).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration (TOML) with a synthetic data source.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory for the dataset description.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn is_on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

fn run(cli: Cli) -> khn::Result<()> {
    match cli.command {
        Command::Train(args) => {
            khn::cli::cmd_train(&args.config, &args.out, args.seed)?;
        }
        Command::Eval(args) => {
            khn::cli::cmd_eval(
                &args.checkpoint,
                args.episodes,
                args.finetune.is_on(),
                args.seed,
                args.out.as_deref(),
            )?;
        }
        Command::Gradcheck(args) => {
            khn::cli::cmd_gradcheck(&args.config)?;
        }
        Command::GenData(args) => {
            khn::cli::cmd_gen_data(&args.config, &args.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
