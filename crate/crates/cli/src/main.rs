//! Pipeline front door: subcommands over a validated config file.
//!
//! Every run is reproducible from config + seed; `--threads` changes only
//! wall time, never output bytes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use claimscan::config::PipelineConfig;
use claimscan::pipeline::Pipeline;

#[derive(Parser)]
#[command(
    name = "claimscan",
    about = "Rolling cross-section claims pipeline: synthetic data, cohorts, boosted trees, \
             imbalance-aware evaluation, and attribution reports"
)]
struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Output is identical at any value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate synthetic claims, demographics, and ground truth.
    Synth,
    /// Apply eligibility and labeling; build downsampled cohorts.
    Cohort,
    /// Derive the feature schema and persist feature matrices.
    Featurize,
    /// Grid search (and optional feature elimination) on the tune split.
    Tune,
    /// Train per-regime models and write leakage audits.
    Train,
    /// Evaluate models: reports, PR/ROC curves, benchmark screens.
    Evaluate,
    /// Attribution reports for trained models.
    Explain,
    /// Run every stage for every configured mode and regime.
    RunAll,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Cohort => "cohort",
            Command::Featurize => "featurize",
            Command::Tune => "tune",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Explain => "explain",
            Command::RunAll => "run-all",
        }
    }
}

fn run(cli: &Cli) -> claimscan::Result<()> {
    let config_path = cli.config.as_ref().ok_or_else(|| {
        claimscan::Error::Config("--config <file> is required".into())
    })?;
    let mut config = PipelineConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    if let Some(threads) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| claimscan::Error::Config(format!("thread pool: {e}")))?;
    }

    let pipeline = Pipeline::new(config)?;
    match cli.command {
        Command::Synth => pipeline.run_synth(),
        Command::Cohort => pipeline.run_cohort(),
        Command::Featurize => pipeline.run_featurize(),
        Command::Tune => pipeline.run_tune(),
        Command::Train => pipeline.run_train(),
        Command::Evaluate => pipeline.run_evaluate(),
        Command::Explain => pipeline.run_explain(),
        Command::RunAll => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}: {err}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
