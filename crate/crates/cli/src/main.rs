use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Patch-level lesion counting: synthetic data, training, evaluation and
/// localization.
#[derive(Parser, Debug)]
#[command(name = "pcount", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Configuration file (`key = value` lines or a JSON object).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// Zero lesion intensity offsets (counts cannot be learned).
        #[arg(long)]
        null: bool,
    },
    /// Train a network on the manifest's training split.
    Train {
        /// Dataset manifest CSV, as written by `synth`.
        #[arg(long)]
        manifest: PathBuf,
        /// Override the configured iteration limit.
        #[arg(long)]
        max_iterations: Option<u64>,
    },
    /// Count metrics on lesion-centred validation patches.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Also write the first K (true, predicted) pairs to scatter.csv.
        #[arg(long, value_name = "K")]
        scatter: Option<usize>,
    },
    /// Pairwise ordering accuracy on validation patches.
    Pairs {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
        n_pairs: u64,
        /// Predict this constant count for every patch (debugging aid).
        #[arg(long, conflicts_with = "oracle")]
        constant: Option<u32>,
    },
    /// Locate lesions in one case from uniformly sampled patch counts.
    Detect {
        #[command(flatten)]
        model: ModelArgs,
        /// Case identifier from the manifest.
        #[arg(long = "case")]
        case_id: String,
        #[arg(long, default_value_t = 5_000)]
        n: usize,
        /// Return every centre at or above this quantile of predicted counts
        /// instead of the single maximum.
        #[arg(long)]
        q: Option<f64>,
    },
    /// Convert a NIfTI-1 volume to the lvol format.
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// Store as bytes (values must be integers in 0..=255).
        #[arg(long)]
        u8: bool,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Trained checkpoint (not needed with --oracle).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset manifest CSV, as written by `synth`.
    #[arg(long)]
    manifest: PathBuf,
    /// Use true counts in place of predictions.
    #[arg(long)]
    oracle: bool,
}

fn main() -> ExitCode {
    lesion_count::runtime::tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
