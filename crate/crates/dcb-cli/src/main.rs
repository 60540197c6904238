//! `dcb` — estimation of treatment-history effects on panel data,
//! simulation reproduction, and balance diagnostics.
//!
//! Exit codes: 0 on success, 1 on input or configuration errors, 2 when a
//! balance program is infeasible or a stratum is degenerate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcb_core::DcbError;

mod config;
mod diagnose;
mod estimate;
mod manifest;
mod simulate;
mod tables;

#[derive(Parser)]
#[command(name = "dcb", version, about = "Dynamic covariate balancing for treatment histories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate mean potential outcomes and contrasts on a panel CSV.
    Estimate(estimate::EstimateArgs),
    /// Run the Monte Carlo experiment suite and write result tables.
    Simulate(simulate::SimulateArgs),
    /// Balance and weight diagnostics without estimation.
    Diagnose(diagnose::DiagnoseArgs),
}

/// Flags shared by the panel-consuming subcommands.
#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Long-form panel CSV (unit_id, period, treatment, outcome, x...).
    #[arg(long)]
    pub panel: PathBuf,

    /// Column mapping, e.g. "unit=uid,period=t,treatment=w,outcome=y".
    /// Unmapped columns are covariates; add "covariates=a;b;c" to restrict.
    #[arg(long)]
    pub schema: Option<String>,

    /// Target treatment history as comma-separated bits, e.g. "1,1".
    #[arg(long)]
    pub d: String,

    /// Seed for fold assignment and any randomized choices.
    #[arg(long, env = "DCB_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Output directory (created if missing).
    #[arg(long, default_value = "dcb-out")]
    pub out_dir: PathBuf,

    /// Lower endpoint of the slack-multiplier tuning grid.
    #[arg(long)]
    pub grid_lo: Option<f64>,

    /// Upper endpoint of the slack-multiplier tuning grid.
    #[arg(long)]
    pub grid_hi: Option<f64>,

    /// Values per grid.
    #[arg(long)]
    pub grid_len: Option<usize>,

    /// Number of grids.
    #[arg(long)]
    pub grid_count: Option<usize>,

    /// Override the base per-period balance slack δ_t.
    #[arg(long)]
    pub base_delta: Option<f64>,
}

fn exit_code_for(err: &DcbError) -> u8 {
    match err {
        DcbError::Infeasible { .. }
        | DcbError::NoFeasiblePoint { .. }
        | DcbError::EmptyStratum { .. }
        | DcbError::ZeroDenominator => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => estimate::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Diagnose(args) => diagnose::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
