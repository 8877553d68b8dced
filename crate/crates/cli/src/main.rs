//! `mrvi`: command-line driver for the risk-sensitive control solvers.
//!
//! Exit codes: 0 success, 1 invalid input, 2 non-convergence, 3 internal error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrvi_core::diffusion::RviMode;

use crate::commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "mrvi",
    version,
    about = "Risk-sensitive control by multiplicative (relative) value iteration"
)]
pub struct Cli {
    /// Worker threads for parallel sweeps and Monte Carlo paths.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a problem file and list every violation found.
    Validate(InputArgs),
    /// Solve for the eigenvalue by RVI (or VI when --lambda is given).
    Solve(SolveArgs),
    /// Exact minimum over stationary policies by Perron-root enumeration.
    Oracle(InputArgs),
    /// Write the grid chain generated from a diffusion problem.
    Discretize(InputArgs),
    /// Parabolic value or relative value iteration on a diffusion grid.
    Pde(PdeArgs),
    /// Monte Carlo cross-check of a solved problem.
    Mc(McArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Problem file (JSON).
    pub input: PathBuf,
    /// Result file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Convergence threshold on the span of the log-increment.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Reference state (chains only; diffusion grids use the origin node).
    #[arg(long)]
    pub x0: Option<usize>,
    /// Iterate on log V instead of V.
    #[arg(long)]
    pub log_space: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Known eigenvalue; switches to plain value iteration.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Per-iteration CSV trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Normalized,
    EulerOde,
}

impl From<ModeArg> for RviMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Normalized => RviMode::Normalized,
            ModeArg::EulerOde => RviMode::EulerOde,
        }
    }
}

#[derive(Debug, Args)]
pub struct PdeArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[arg(long, value_enum, default_value = "normalized")]
    pub mode: ModeArg,
    /// Run parabolic value iteration with this rate instead of RVI.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Integration horizon.
    #[arg(long, default_value_t = 50.0)]
    pub t_end: f64,
    /// Ground-state CSV `(x, psi)`; defaults to the result path with a .csv extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// CSV trace of `Phi(t, x0)`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CheckArg {
    /// Finite-horizon eigen-identity on the chain (or grid chain).
    ChainIdentity,
    /// Euler–Maruyama growth-rate estimate.
    SdeGrowth,
    /// Martingale identity with the grid ground state.
    SdeMartingale,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_enum, default_value = "chain-identity")]
    pub check: CheckArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    /// Steps for chains, time for diffusions.
    #[arg(long, default_value_t = 5.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt_sim: f64,
    /// Start state (chains) or comma-separated start point (diffusions).
    #[arg(long)]
    pub start: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::NotConverged(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}
