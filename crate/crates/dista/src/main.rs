//! `dista` binary: thin argument-parsing wrapper over the library command
//! functions, mapping error classes onto documented exit codes.
//!
//! Exit codes: 0 success, 1 usage/config, 2 numeric failure, 3 I/O or
//! malformed file, 4 incompatible checkpoint, 5 gradient check failed.

use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};
use dista::cli::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train, load_config};
use dista::DistaError;

#[derive(Parser)]
#[command(
    name = "dista",
    version,
    about = "Spiking transformer with learnable membrane time constants, \
             temporal-window attention, and attention denoising"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.csv and checkpoint.bin to the output dir
    Train {
        /// Flat `key = value` config file
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint (config must match it exactly)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Stop cleanly after this many epochs of this invocation
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint; prints `test_acc=<float> test_loss=<float>`
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check backward-pass gradients against finite differences (use a tiny config)
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Deliberately corrupt one gradient first (negative-control fixture)
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train once per value of one hyperparameter axis; writes ablation.csv
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: timesteps, taw_size, denoise_threshold, adn_blocks
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 1,2,4
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(err: &DistaError) -> i32 {
    match err {
        DistaError::Config(_) => 1,
        DistaError::Numeric(_)
        | DistaError::Shape(_)
        | DistaError::Contract(_)
        | DistaError::ParamDomain(_)
        | DistaError::DegenerateBatch(_) => 2,
        DistaError::Io { .. } | DistaError::Format(_) | DistaError::Data(_) => 3,
        DistaError::Compat(_) => 4,
        DistaError::Gradcheck(_) => 5,
    }
}

fn run(cli: Cli) -> dista::Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            checkpoint,
            out,
            seed,
            stop_after,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out.to_string_lossy().into_owned();
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cmd_train(&cfg, checkpoint.as_deref(), stop_after).map(|_| ())
        }
        Cmd::Eval {
            config,
            checkpoint,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cmd_eval(&cfg, &checkpoint).map(|_| ())
        }
        Cmd::Gradcheck {
            config,
            seed,
            corrupt_backward,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cmd_gradcheck(&cfg, corrupt_backward)
        }
        Cmd::Ablate {
            config,
            axis,
            values,
            out,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out.to_string_lossy().into_owned();
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cmd_ablate(&cfg, &axis, &values)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        exit(exit_code(&e));
    }
}
