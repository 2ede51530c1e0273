use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "sparse-pose",
    version,
    about = "Two-stage sparse keypoint transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand that builds a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset: base-256, base-384, small-256, small-384 or toy.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Quality threshold; samples with Q at or above it skip refinement.
    #[arg(long = "q-thres")]
    pub q_thres: Option<f64>,
    /// Fraction of coarse patches promoted to the fine stage.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic figures; writes a checkpoint and a per-epoch CSV log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and sweep the quality threshold.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples (defaults to the configured validation count).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Predict keypoints for one PNM image.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print the multiply-accumulate breakdown of a configuration.
    Flops {
        #[command(flatten)]
        run: RunArgs,
        /// Count only the coarse stage.
        #[arg(long)]
        coarse_only: bool,
    },
    /// Export patch scores, the selection mask, the parent map and per-layer responses.
    Visualize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { run, resume } => commands::train(&run, resume.as_deref()),
        Command::Eval {
            run,
            checkpoint,
            samples,
        } => commands::eval(&run, &checkpoint, samples),
        Command::Infer {
            run,
            checkpoint,
            image,
        } => commands::infer(&run, &checkpoint, &image),
        Command::Flops { run, coarse_only } => commands::flops(&run, coarse_only),
        Command::Visualize {
            run,
            checkpoint,
            image,
        } => commands::visualize(&run, &checkpoint, &image),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
