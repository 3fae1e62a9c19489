use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use muse_cli::commands;

/// Data-free distillation engine: synthesize multi-resolution training
/// images from a frozen teacher and distill a student under a pixel budget.
#[derive(Parser)]
#[command(name = "muse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full distillation loop from a config file.
    Train {
        /// Path to the flat key-value config.
        #[arg(long)]
        config: PathBuf,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Supervised teacher pretraining; writes the teacher checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Report the minimum pairwise embedding distance and derived radii.
    DeriveRadii {
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Render a target mask as a text grid and a PGM image.
    MaskPreview {
        /// `full` or `gaussian`.
        #[arg(long)]
        kind: String,
        /// One value for `full`, `peak,sigma` for `gaussian`.
        #[arg(long)]
        params: String,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images from a pool file and write them as PPM.
    DumpImages {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print a pool file's ledger and contents summary.
    InspectPool {
        #[arg(long)]
        pool: PathBuf,
    },
}

fn run(cli: Cli) -> muse_core::Result<()> {
    match cli.command {
        Command::Train { config, dry_run } => commands::cmd_train(&config, dry_run),
        Command::TrainTeacher { config } => commands::cmd_train_teacher(&config),
        Command::Eval { checkpoint, dataset, data_dir } => {
            commands::cmd_eval(&checkpoint, &dataset, &data_dir)
        }
        Command::DeriveRadii { embeddings } => commands::cmd_derive_radii(&embeddings),
        Command::MaskPreview { kind, params, size, out } => {
            let parsed: Result<Vec<f64>, _> =
                params.split(',').map(|p| p.trim().parse::<f64>()).collect();
            let parsed = parsed.map_err(|_| {
                muse_core::Error::InvalidArgument(format!("cannot parse mask params {params:?}"))
            })?;
            commands::cmd_mask_preview(&kind, &parsed, size, &out)
        }
        Command::DumpImages { pool, count, out_dir } => {
            commands::cmd_dump_images(&pool, count, &out_dir)
        }
        Command::InspectPool { pool } => commands::cmd_inspect_pool(&pool),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
