//! Command-line front end for the areal count model: fit, predict,
//! decompose, simulate, and graph-check, driven by one TOML config file.
//!
//! Exit codes: 0 success, 1 invalid input or I/O failure, 2 fit finished
//! without converging (outputs are still written), 3 a simulation mean
//! exploded past its cap.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};

use crate::config::LoadedConfig;

/// Everything that stops a command, mapped to an exit code in [`main`].
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Graph building, ingestion, fitting, or forecasting failed.
    #[error(transparent)]
    Model(#[from] epiareal::Error),
    /// A saved document does not match this build or the loaded data.
    #[error("schema mismatch: {0}")]
    Schema(String),
    /// Bad paths, malformed config, unusable flag values.
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(epiareal::Error::ExplosionGuard { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "epiareal",
    version,
    about = "Endemic-epidemic modelling of daily counts on a region graph"
)]
struct Cli {
    /// Config file (TOML); defaults to ./config.toml when present.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Log only errors and keep stdout quiet.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured model; writes fit.json and table1.txt.
    Fit {
        /// Cap on alternation rounds, overriding [fit] max_outer_iters.
        #[arg(long)]
        max_outer_iters: Option<usize>,
        /// Clip negative counts to zero instead of rejecting the file.
        #[arg(long)]
        clip_negatives: bool,
    },
    /// Forecast the day after the panel ends; writes forecast.csv.
    Predict {
        /// Fitted model (default: <out-dir>/fit.json).
        #[arg(long, value_name = "FILE")]
        fit_file: Option<PathBuf>,
        /// Counts CSV holding the forecast day's observed values.
        #[arg(long, value_name = "FILE")]
        observed: Option<PathBuf>,
        /// Central interval level in (0, 1).
        #[arg(long)]
        level: Option<f64>,
    },
    /// Average component shares per region; writes decomposition.csv.
    Decompose {
        /// Fitted model (default: <out-dir>/fit.json).
        #[arg(long, value_name = "FILE")]
        fit_file: Option<PathBuf>,
    },
    /// Draw a synthetic count panel; writes counts.csv.
    Simulate {
        /// Parameter file: a params document or a saved fit.json.
        #[arg(long, value_name = "FILE")]
        params_file: Option<PathBuf>,
        /// Panel length in days, overriding [simulate] days.
        #[arg(long)]
        days: Option<usize>,
        /// First day, overriding [simulate] start_date.
        #[arg(long, value_name = "YYYY-MM-DD")]
        start_date: Option<NaiveDate>,
    },
    /// Validate the region graph and print neighbour-order statistics.
    GraphCheck,
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    let lc = LoadedConfig::load(cli.config.as_deref())?;
    let out_dir = lc.out_dir(cli.out_dir.as_deref());
    match &cli.command {
        Command::Fit {
            max_outer_iters,
            clip_negatives,
        } => commands::cmd_fit(&lc, &out_dir, *max_outer_iters, *clip_negatives, cli.quiet),
        Command::Predict {
            fit_file,
            observed,
            level,
        } => commands::cmd_predict(
            &lc,
            &out_dir,
            fit_file.as_deref(),
            observed.as_deref(),
            *level,
            cli.quiet,
        ),
        Command::Decompose { fit_file } => {
            commands::cmd_decompose(&lc, &out_dir, fit_file.as_deref())
        }
        Command::Simulate {
            params_file,
            days,
            start_date,
        } => commands::cmd_simulate(
            &lc,
            &out_dir,
            params_file.as_deref(),
            *days,
            *start_date,
            cli.seed,
        ),
        Command::GraphCheck => commands::cmd_graph_check(&lc),
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default()
            .default_filter_or(if cli.quiet { "error" } else { "info" }),
    )
    .format_timestamp(None)
    .init();

    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
