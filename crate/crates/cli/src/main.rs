//! `qca` — simulate quantum lattice-gas and partitioned-circuit automata,
//! validate their defining invariants, and recover lattice-gas structure
//! from Heisenberg-picture rules.
//!
//! Every run is deterministic given its inputs, seed, and tolerances; all
//! reports are machine-readable JSON.

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use qca_cli::{commands, RunArgs};

#[derive(Parser)]
#[command(
    name = "qca",
    version,
    about = "Quantum cellular automata: simulation, validation, and structure recovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a sparse state, writing one state file per step plus a CSV of
    /// per-site probability mass.
    Simulate(RunArgs),
    /// Validate a model or rule: *-algebra, translation invariance,
    /// causality in both directions, structural reversibility.
    Check(RunArgs),
    /// Decide whether a rule is a lattice gas in disguise and reconstruct
    /// the basis change and collision if so.
    Detect(RunArgs),
    /// Solve for the finite-window intertwiner implementing a rule, with a
    /// uniqueness certificate.
    Intertwine(RunArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successes; any usage error is input
            // validation (exit 1 — clap's default 2 is taken by the model
            // invariant code).
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Check(args) => commands::check(args),
        Command::Detect(args) => commands::detect(args),
        Command::Intertwine(args) => commands::intertwine(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qca: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
