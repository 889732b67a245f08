//! TOML experiment configurations. Every table rejects unknown keys and
//! omitted keys take the default scenario constants.

use std::path::{Path, PathBuf};

use level2_core::inverse::{InferenceMode, InverseSettings};
use level2_core::mcp::SolverSettings;
use level2_core::scenario::LaneChangeConfig;
use level2_core::sim::SimSettings;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    LqCounterexample,
    LqSweep,
    LaneForwardSweep,
    LaneInferOnline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::LqCounterexample => "lq-counterexample",
            Command::LqSweep => "lq-sweep",
            Command::LaneForwardSweep => "lane-forward-sweep",
            Command::LaneInferOnline => "lane-infer-online",
        }
    }
}

/// A configuration file: common keys plus the command's `[settings]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile<T> {
    /// When present, must name the command being run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Command>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub settings: T,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl<T: Default> Default for ConfigFile<T> {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: DEFAULT_SEED,
            out: None,
            settings: T::default(),
        }
    }
}

impl<T: DeserializeOwned + Default> ConfigFile<T> {
    /// Reads `path`, or the defaults when `path` is `None`, and checks the
    /// `experiment` key against `command`.
    pub fn load(path: Option<&Path>, command: Command) -> Result<Self> {
        let cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(e) = cfg.experiment {
            if e != command {
                return Err(CliError::Validation(format!(
                    "config is for {} but the command is {}",
                    e.name(),
                    command.name()
                )));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterexampleSettings {
    pub x_init: [f64; 2],
    /// Off-diagonal entry of agent 1's own cost at the two candidates.
    pub couplings: [f64; 2],
    /// Append a finite-difference check of the analytic gradient.
    pub gradient_check: bool,
    pub fd_step: f64,
}

impl Default for CounterexampleSettings {
    fn default() -> Self {
        Self {
            x_init: [1.0, -1.0],
            couplings: [0.8, -0.8],
            gradient_check: false,
            fd_step: 1e-6,
        }
    }
}

impl CounterexampleSettings {
    pub fn validate(&self) -> Result<()> {
        finite("x_init", &self.x_init)?;
        finite("couplings", &self.couplings)?;
        positive("fd_step", self.fd_step)
    }

    /// Whether the instance is the published one, so that its losses can be
    /// compared with the published values.
    pub fn is_reference(&self) -> bool {
        *self
            == Self {
                gradient_check: self.gradient_check,
                fd_step: self.fd_step,
                ..Self::default()
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqSweepSettings {
    pub s_values: Vec<f64>,
    pub horizon: usize,
    pub x_init: [f64; 2],
    /// Replaces the descent settings as a whole when given.
    #[serde(default = "InverseSettings::lq")]
    pub inverse: InverseSettings,
}

impl Default for LqSweepSettings {
    fn default() -> Self {
        Self {
            s_values: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            horizon: 3,
            x_init: [10.0, 10.0],
            inverse: InverseSettings::lq(),
        }
    }
}

impl LqSweepSettings {
    pub fn validate(&self) -> Result<()> {
        if self.s_values.is_empty() {
            return Err(CliError::Validation("s_values must not be empty".into()));
        }
        finite("s_values", &self.s_values)?;
        finite("x_init", &self.x_init)?;
        if self.horizon < 2 {
            return Err(CliError::Validation("horizon must be at least 2".into()));
        }
        self.inverse.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaneSweepSettings {
    /// Values of both estimates; the grid is their Cartesian product.
    pub estimates: Vec<f64>,
    /// Each vehicle's own lateral target.
    pub own: [f64; 2],
    /// Band around the top lane center in which the lane change counts as
    /// done.
    pub lane_tol: f64,
    pub write_trajectories: bool,
    pub scenario: LaneChangeConfig,
    pub sim: SimSettings,
    pub solver: SolverSettings,
}

impl Default for LaneSweepSettings {
    fn default() -> Self {
        Self {
            estimates: (0..8).map(|k| 0.5 + 0.5 * k as f64).collect(),
            own: [1.0, 1.0],
            lane_tol: 0.25,
            write_trajectories: true,
            scenario: LaneChangeConfig::default(),
            sim: SimSettings::default(),
            solver: SolverSettings::default(),
        }
    }
}

impl LaneSweepSettings {
    pub fn validate(&self) -> Result<()> {
        if self.estimates.is_empty() {
            return Err(CliError::Validation("estimates must not be empty".into()));
        }
        finite("estimates", &self.estimates)?;
        finite("own", &self.own)?;
        positive("lane_tol", self.lane_tol)?;
        self.scenario.validate()?;
        self.sim.validate()?;
        self.solver.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineSettings {
    pub mode: InferenceMode,
    /// Ground truth `[θ^{1,1}, θ^{1,2}, θ^{2,1}, θ^{2,2}]` of the simulated
    /// vehicles.
    pub truth: [f64; 4],
    /// Initial value of every estimated entry.
    pub theta0: f64,
    pub window: usize,
    pub lane_tol: f64,
    pub scenario: LaneChangeConfig,
    pub sim: SimSettings,
    pub solver: SolverSettings,
    /// Replaces the descent settings as a whole when given.
    #[serde(default = "InverseSettings::lane_change")]
    pub inverse: InverseSettings,
}

impl Default for OnlineSettings {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Level2,
            truth: [1.0, 3.0, 3.0, 1.0],
            theta0: 2.0,
            window: 15,
            lane_tol: 0.25,
            scenario: LaneChangeConfig::default(),
            sim: SimSettings::default(),
            solver: SolverSettings::default(),
            inverse: InverseSettings::lane_change(),
        }
    }
}

impl OnlineSettings {
    pub fn validate(&self) -> Result<()> {
        finite("truth", &self.truth)?;
        finite("theta0", &[self.theta0])?;
        positive("lane_tol", self.lane_tol)?;
        if self.window < 2 || self.window > self.sim.sim_steps {
            return Err(CliError::Validation(
                "window must lie in 2..=sim.sim_steps".into(),
            ));
        }
        self.scenario.validate()?;
        self.sim.validate()?;
        self.solver.validate()?;
        self.inverse.validate()?;
        Ok(())
    }
}

fn finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{name} must be finite")))
    }
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{name} must be positive, got {value}"
        )))
    }
}
