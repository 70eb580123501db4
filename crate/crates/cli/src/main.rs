//! `mars` — the pipeline frontend: simulate telemetry, fit the two scaling
//! laws, run the balanced rank search, dump the brute-force oracle, and
//! report regret, cost, and correlation analyses.
//!
//! Every command is fully determined by its flag set (plus an optional
//! `--config` JSON file that flags override); repeating a command with the
//! same inputs reproduces its output files byte for byte. Exit codes:
//! 0 success, 2 identifiability/mismatch, 3 fit or numeric failure, 4 I/O or
//! malformed input, 64 usage.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{FileConfig, SimFlags};

#[derive(Parser)]
#[command(name = "mars", version, about = "Scaling-law guided LoRA rank-pair search")]
struct Cli {
    /// JSON file of defaults; explicit flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic calibration telemetry plus a ground-truth sidecar
    Simulate(SimulateArgs),
    /// Fit both scaling laws from telemetry and write the coefficients file
    Fit(FitArgs),
    /// Prune the rank grid to balanced pairs and pick the predicted best
    Search(SearchArgs),
    /// Brute-force the full grid's true perplexities into a CSV table
    Oracle(OracleArgs),
    /// Compare search against the oracle: regret, step costs, correlations
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimFlags,
    /// Rank values for the calibration plan (diagonal + anti-diagonal pairs)
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<u32>>,
    /// Keep only the first N plan runs (0 writes empty telemetry)
    #[arg(long)]
    runs: Option<usize>,
    /// Telemetry format: jsonl or csv
    #[arg(long)]
    format: Option<String>,
    /// Telemetry output path (default telemetry.jsonl / telemetry.csv)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth sidecar output path
    #[arg(long, default_value = "sidecar.json")]
    sidecar_out: PathBuf,
}

#[derive(clap::Args)]
struct FitArgs {
    /// Telemetry file to calibrate from
    #[arg(long)]
    telemetry: PathBuf,
    /// Telemetry format: jsonl or csv
    #[arg(long)]
    format: Option<String>,
    /// Huber transition point in log-residual space
    #[arg(long)]
    huber_delta: Option<f64>,
    /// Evaluations without improvement that count as converged
    #[arg(long)]
    patience: Option<usize>,
    /// Coefficients output path
    #[arg(long, default_value = "coefficients.json")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SearchArgs {
    /// Coefficients file from `fit`
    #[arg(long)]
    coefficients: PathBuf,
    /// Dataset size the final run will train on
    #[arg(long)]
    d_target: Option<u64>,
    /// Candidate LLM ranks
    #[arg(long, value_delimiter = ',')]
    r_options: Option<Vec<u32>>,
    #[arg(long)]
    r_min: Option<u32>,
    #[arg(long)]
    r_max: Option<u32>,
    /// Search result output path
    #[arg(long, default_value = "search.json")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[command(flatten)]
    sim: SimFlags,
    /// Rank values whose full cross product forms the grid
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<u32>>,
    /// Dataset size to evaluate at
    #[arg(long)]
    d_target: Option<u64>,
    /// Oracle table output path
    #[arg(long, default_value = "oracle.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[command(flatten)]
    sim: SimFlags,
    /// Search result file from `search`
    #[arg(long)]
    search: PathBuf,
    /// Oracle table from `oracle`, evaluated at the search's d_target
    #[arg(long)]
    oracle: PathBuf,
    /// Calibration telemetry, for the guided branch's step cost
    #[arg(long)]
    telemetry: PathBuf,
    /// Telemetry format: jsonl or csv
    #[arg(long)]
    format: Option<String>,
    /// Price calibration as parallel adapter heads on one frozen backbone
    #[arg(long)]
    shared_backbone: Option<bool>,
    /// Heads per backbone pass in shared mode
    #[arg(long)]
    parallel_heads: Option<usize>,
    /// Report output path
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Gap-vs-perplexity scatter series output path
    #[arg(long, default_value = "scatter.csv")]
    scatter_out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(64);
        }
    };

    let result = FileConfig::load(cli.config.as_deref()).and_then(|file| match &cli.command {
        Command::Simulate(args) => commands::cmd_simulate(args, &file),
        Command::Fit(args) => commands::cmd_fit(args, &file),
        Command::Search(args) => commands::cmd_search(args, &file),
        Command::Oracle(args) => commands::cmd_oracle(args, &file),
        Command::Report(args) => commands::cmd_report(args, &file),
    });

    if let Err(e) = result {
        eprintln!("mars: {e}");
        std::process::exit(e.exit_code());
    }
}
