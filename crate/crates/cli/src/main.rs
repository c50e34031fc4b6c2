//! `dmsm` command line: simulate a phantom dataset, train the self-supervised
//! diffusion model, reconstruct with multi-path inference, and evaluate.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

mod commands;
mod render;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dmsm", version, about = "Self-supervised dual-domain diffusion MRI reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub(crate) struct ConfigArgs {
    /// Run configuration file (JSON); defaults to the built-in configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the seed relevant to the subcommand (dataset seed for
    /// simulate, training seed for train, path base seed for reconstruct).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the phantom dataset with per-slice sampling masks.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the model on under-sampled measurements.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Training mode: self_supervised (default) or supervised.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Multi-path reconstruction of test slices from a checkpoint.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of reverse-diffusion paths.
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Evaluate reconstructions against the fully sampled ground truth.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn thread_pool_from_env() {
    if let Ok(v) = std::env::var("DMSM_NUM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> std::process::ExitCode {
    // clap's own usage errors exit with 2 by default; remap to the stable
    // contract (1 = usage/config, 2 = runtime).
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                std::process::ExitCode::SUCCESS
            } else {
                std::process::ExitCode::from(1)
            };
        }
    };
    thread_pool_from_env();

    let result = match cli.command {
        Command::Simulate { config, force } => commands::simulate(config, force),
        Command::Train { config, resume, mode } => commands::train(config, resume, mode),
        Command::Reconstruct { config, paths } => commands::reconstruct(config, paths),
        Command::Evaluate { config } => commands::evaluate(config),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::ExitCode::from(1)
        }
        Err(commands::CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::ExitCode::from(2)
        }
    }
}
