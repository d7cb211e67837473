use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graincode::Error;
use graincode_cli::commands::{self, CommonArgs};

#[derive(Parser)]
#[command(name = "graincode", version, about = "Adaptive-granularity image codec and prior")]
struct Cli {
    /// TOML run config; the built-in desk preset when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for checkpoints, metrics, renders, and manifests.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus of smooth images with textured patches.
    Synth,
    /// Train the encoder, allocator, codebooks, and decoder.
    TrainVae {
        /// Overrides the config's step count.
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
    },
    /// Train the sequence prior on codes from a trained first stage.
    TrainPrior {
        /// Overrides the config's step count.
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
    },
    /// Reconstruct corpus images; writes recon, grain, and error maps.
    Reconstruct {
        /// Number of images to reconstruct.
        #[arg(long, value_name = "N", default_value_t = 4)]
        batch: usize,
    },
    /// Sample images from the trained prior.
    Sample {
        /// Number of images to sample.
        #[arg(long, value_name = "N", default_value_t = 4)]
        batch: usize,
        /// Class label to condition on.
        #[arg(long, value_name = "N")]
        label: Option<usize>,
    },
    /// Print code-length and codebook statistics.
    Stats {
        /// "expected" prints the configured expected code length and exits.
        #[arg(long, value_name = "NAME")]
        mode: Option<String>,
    },
    /// Run a controlled comparison; writes a JSON report.
    Ablate {
        /// fixed-vs-dynamic, random-assignment, or input-layers.
        #[arg(long, value_name = "NAME")]
        mode: String,
    },
    /// Check every training gradient against central differences.
    Gradcheck,
}

/// Stable exit categories: 2 config, 3 data, 4 numeric, 5 sampling deadlock.
/// Clap's own usage errors also exit 2.
fn exit_category(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape { .. } => 2,
        Error::Data(_)
        | Error::Io(_)
        | Error::Index { .. }
        | Error::Coverage { .. }
        | Error::DuplicatePosition { .. }
        | Error::RegionConflict { .. }
        | Error::Structure { .. }
        | Error::Length { .. } => 3,
        Error::Numeric(_) | Error::EmptyLoss | Error::EmptyStats | Error::Determinism => 4,
        Error::Deadlock(_) => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAINCODE_LOG", "info"))
        .init();
    let cli = Cli::parse();
    let args = CommonArgs {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    let result = match cli.command {
        Command::Synth => commands::cmd_synth(&args),
        Command::TrainVae { steps } => commands::cmd_train_vae(&args, steps),
        Command::TrainPrior { steps } => commands::cmd_train_prior(&args, steps),
        Command::Reconstruct { batch } => commands::cmd_reconstruct(&args, batch),
        Command::Sample { batch, label } => commands::cmd_sample(&args, batch, label),
        Command::Stats { mode } => commands::cmd_stats(&args, mode.as_deref()),
        Command::Ablate { mode } => commands::cmd_ablate(&args, &mode),
        Command::Gradcheck => commands::cmd_gradcheck(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_category(&e))
        }
    }
}
