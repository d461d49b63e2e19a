//! `qest`: run estimation episodes, ensembles and policy training, and
//! manage the policy store.
//!
//! Exit codes: 0 success; 1 usage error or an unreadable or malformed input
//! file; 2 domain error (unknown policy or preset, duplicate policy id,
//! parameter values outside their valid range).

mod commands;
mod manifest;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "qest", version, about = "Adaptive Bayesian characterization of a qubit coupled to an unknown mode")]
pub struct Cli {
    /// Maximum number of episodes run in parallel (default: all cores).
    /// Results do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    /// Policy store CSV; overrides the QEST_POLICY_STORE environment variable.
    #[arg(long, global = true, value_name = "FILE")]
    pub store: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a single estimation episode and write its trace.
    Estimate(EstimateArgs),
    /// Run an ensemble (or a named figure preset) and write error curves.
    Ensemble(EnsembleArgs),
    /// Train a new policy by particle swarm optimization.
    Train(train::TrainArgs),
    /// Inspect or edit the policy store.
    #[command(subcommand)]
    Policies(PoliciesCommand),
}

/// Overrides applied on top of a config file or preset.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Policy id (`man`, `rand`, a store id, or `mach_c_<key>` with --density).
    #[arg(long)]
    pub policy: Option<String>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of episodes in the ensemble.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Shot budget per episode.
    #[arg(long)]
    pub shots: Option<u32>,
    /// True relaxation time (`inf` for none).
    #[arg(long, value_name = "T1")]
    pub true_t1: Option<f64>,
    /// Relaxation time presumed by the policy and the likelihood.
    #[arg(long, value_name = "T1")]
    pub presumed_t1: Option<f64>,
    /// Readout error probability.
    #[arg(long, value_name = "P")]
    pub pe: Option<f64>,
    /// SMC particles per posterior.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Shots between recorded points.
    #[arg(long)]
    pub stride: Option<u32>,
    /// Shaped waiting-time density (`t_i,P_t` CSV) for `mach_c_*` policies.
    #[arg(long, value_name = "FILE")]
    pub density: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Experiment config (JSON).
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "qest-out")]
    pub out: PathBuf,
    /// Episode index; selects the true system and random stream.
    #[arg(long, default_value_t = 0)]
    pub episode: u64,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Experiment config (JSON).
    #[arg(long, value_name = "FILE", required_unless_present = "preset", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named study: fig2, fig3e, fig4, fig5a, fig5b, fig5c, fig5d.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "qest-out")]
    pub out: PathBuf,
    /// Run one curve per listed true relaxation time, with the policy and
    /// likelihood keeping the presumed value.
    #[arg(long, value_name = "T1,...", value_delimiter = ',', conflicts_with = "preset")]
    pub mismatch: Option<Vec<f64>>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum PoliciesCommand {
    /// List policy ids.
    List,
    /// Print one policy's parameters.
    Show { id: String },
    /// Add rows from a policy CSV to the store.
    Import { file: PathBuf },
    /// Write the store as CSV.
    Export { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
