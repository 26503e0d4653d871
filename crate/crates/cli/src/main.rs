//! Experiment runner: data generation, estimation and diagnostics with seed fan-out and parameter sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{CliError, SweepSpec};

#[derive(Parser, Debug)]
#[command(name = "selftest", version, about = "Self-test loss estimators: data generation, fits and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    /// Write sampled fields or particle ensembles.
    GenData,
    /// Fit the diffusion-rate coefficients (weak and strong forms).
    FitH,
    /// Fit the radial interaction kernel (weak and strong forms).
    FitPhi,
    /// Fit the external potential by the weighted Poisson solve.
    FitV,
    /// Fit interaction and external potentials jointly from particle data.
    FitJoint,
    /// Exploration measures, spectra, condition numbers, null-direction and energy checks.
    Diagnose,
}

#[derive(clap::Args, Debug, Clone)]
pub struct RunArgs {
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; overrides the config.
    #[arg(long)]
    seeds: Option<String>,
    /// Sweep one parameter, `param=v1,v2,...`; nested keys use dots.
    #[arg(long)]
    sweep: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    GenData(RunArgs),
    FitH(RunArgs),
    FitPhi(RunArgs),
    FitV(RunArgs),
    FitJoint(RunArgs),
    Diagnose(RunArgs),
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (kind, args) = match cli.command {
        Command::GenData(a) => (CommandKind::GenData, a),
        Command::FitH(a) => (CommandKind::FitH, a),
        Command::FitPhi(a) => (CommandKind::FitPhi, a),
        Command::FitV(a) => (CommandKind::FitV, a),
        Command::FitJoint(a) => (CommandKind::FitJoint, a),
        Command::Diagnose(a) => (CommandKind::Diagnose, a),
    };
    let sweep = args.sweep.as_deref().map(SweepSpec::parse).transpose()?;
    let run = config::load(kind, args.config.as_deref(), args.seeds.as_deref(), sweep)?;
    runner::execute(kind, &run, &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
