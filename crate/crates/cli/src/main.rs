//! Pipeline driver: `synth → mask → train → impute → evaluate → indices`,
//! plus `report` to merge the stage CSVs. Stages communicate through a fixed
//! directory layout under the output root (`scene/`, `masks/`, `models/`,
//! `imputed/<model>/`, `reports/`), so each subcommand can run on its own.
//!
//! All informational output goes to standard error; machine-readable output
//! goes only to files. Exit codes: 0 success, 1 user error, 2 internal error.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// User errors (bad flags, config, or missing inputs) exit with code 1;
/// internal errors (compute or write failures) with code 2.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

#[derive(Parser)]
#[command(
    name = "cloudpatch",
    version,
    about = "Gap filling for multispectral image series: synthetic scenes, \
             cloud masks, neural imputation, evaluation, and water-quality indices"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Pipeline configuration file (TOML with [paths], [scene], [mask],
    /// [train], [indices] sections; all keys optional).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory root (overrides [paths] out; default "out").
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic lake scene under OUT/scene/.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Scene seed (overrides [scene] seed).
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Draw a correlated cloud mask per date and write the masked dataset
    /// (images + masks + manifest) under OUT/masks/.
    Mask {
        #[command(flatten)]
        common: Common,
        /// Mask seed (overrides [mask] seed).
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Fraction of pixels masked per date (overrides [mask] ratio).
        #[arg(long, value_name = "F")]
        mask_ratio: Option<f64>,
    },
    /// Run multi-seed training for the configured models; write checkpoints
    /// under OUT/models/ and run records under OUT/reports/.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train only these models (repeatable; overrides [train] models).
        #[arg(long = "model", value_name = "KIND")]
        models: Vec<String>,
        /// Number of independent runs (overrides [train] n_runs).
        #[arg(long, value_name = "N")]
        runs: Option<usize>,
        /// Base seed for the run sequence (overrides [train] base_seed).
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Fill masked cells with each method and write composited series under
    /// OUT/imputed/<model>/.
    Impute {
        #[command(flatten)]
        common: Common,
        /// Impute with only these methods (repeatable; includes "baseline").
        #[arg(long = "model", value_name = "KIND")]
        models: Vec<String>,
    },
    /// Score each imputed series against the observed values on the masked
    /// cells; write OUT/reports/evaluation.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate only these methods (repeatable).
        #[arg(long = "model", value_name = "KIND")]
        models: Vec<String>,
    },
    /// Daily water-quality index series for observed and imputed data;
    /// write per-method CSVs and an NDCI comparison table under OUT/reports/.
    Indices {
        #[command(flatten)]
        common: Common,
        /// NDCI orientation: standard or printed (overrides [indices]).
        #[arg(long, value_name = "ORIENT")]
        ndci_orientation: Option<String>,
    },
    /// Merge the stage CSVs into OUT/reports/summary.txt; optionally render
    /// PNG charts of the evaluation and index tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Also render OUT/reports/evaluation.png and indices.png.
        #[arg(long)]
        png: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; real parse errors are
            // user errors.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { common, seed } => commands::synth(&common, seed),
        Cmd::Mask {
            common,
            seed,
            mask_ratio,
        } => commands::mask(&common, seed, mask_ratio),
        Cmd::Train {
            common,
            models,
            runs,
            seed,
        } => commands::train(&common, &models, runs, seed),
        Cmd::Impute { common, models } => commands::impute(&common, &models),
        Cmd::Evaluate { common, models } => commands::evaluate(&common, &models),
        Cmd::Indices {
            common,
            ndci_orientation,
        } => commands::indices(&common, ndci_orientation.as_deref()),
        Cmd::Report { common, png } => commands::report(&common, png),
    }
}
