//! Experiment harness for level-2 games: configuration loading, the four
//! experiment commands and their CSV outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::Parser;

pub use config::Command;
pub use error::{CliError, Result};

use config::ConfigFile;

/// Output directory when neither the flag nor the config sets one.
pub const DEFAULT_OUT: &str = "results";

#[derive(Clone, Debug, Parser)]
#[command(name = "level2", version, about = "Run level-2 game experiments")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML configuration; defaults apply to every omitted key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed, overriding the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, env = "LEVEL2_JOBS")]
    pub jobs: Option<usize>,
}

fn load<T: serde::de::DeserializeOwned + Default>(cli: &Cli) -> Result<(ConfigFile<T>, PathBuf)> {
    let mut cfg = ConfigFile::<T>::load(cli.config.as_deref(), cli.command)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    // The output location is not part of the results' provenance.
    cfg.out = None;
    cfg.experiment = Some(cli.command);
    Ok((cfg, out))
}

/// Runs the command on a worker pool of the requested size.
pub fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Validation("jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start the worker pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match cli.command {
        Command::LqCounterexample => {
            let (cfg, out) = load(cli)?;
            commands::run_lq_counterexample(&cfg, &out).map(drop)
        }
        Command::LqSweep => {
            let (cfg, out) = load(cli)?;
            commands::run_lq_sweep(&cfg, &out).map(drop)
        }
        Command::LaneForwardSweep => {
            let (mut cfg, out) = load::<config::LaneSweepSettings>(cli)?;
            cfg.settings.sim.seed = cfg.seed;
            commands::run_lane_forward_sweep(&cfg, &out).map(drop)
        }
        Command::LaneInferOnline => {
            let (mut cfg, out) = load::<config::OnlineSettings>(cli)?;
            cfg.settings.sim.seed = cfg.seed;
            commands::run_lane_infer_online(&cfg, &out).map(drop)
        }
    }
}
