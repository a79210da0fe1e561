//! Library surface of the `qca` binary: argument types, subcommand bodies,
//! and the JSON forms of models, rules, states, and reports. Kept as a lib
//! so integration tests (and downstream tooling) can build the same files
//! the binary reads and writes.

use std::path::PathBuf;

use clap::Args;

pub mod commands;
pub mod formats;

/// Flags shared by all subcommands; each command uses the subset it needs.
#[derive(Args)]
pub struct RunArgs {
    /// Model file: a lattice gas ("factors") or partitioned circuit ("layers").
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,

    /// Heisenberg rule file; alternative to --model for check/detect/intertwine.
    #[arg(long, value_name = "FILE")]
    pub rule: Option<PathBuf>,

    /// Initial sparse state for simulate (JSON array of terms).
    #[arg(long, value_name = "FILE")]
    pub state: Option<PathBuf>,

    /// Number of forward steps to simulate.
    #[arg(long, default_value_t = 1)]
    pub steps: usize,

    /// Window extent in cells per axis (intertwine solve, check boxes).
    #[arg(long, default_value_t = 4)]
    pub window: usize,

    /// Trials for the randomized causality/reversibility probes.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,

    /// RNG seed; defaults to $QCA_CORR_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Override one tolerance (repeatable), e.g. --tol rank=1e-7.
    #[arg(long, value_name = "NAME=VALUE")]
    pub tol: Vec<String>,

    /// Output path: a directory for simulate, a report file otherwise
    /// (stdout if omitted).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Superposition size guard for sparse evolution.
    #[arg(long, default_value_t = 1 << 20)]
    pub term_cap: usize,
}
