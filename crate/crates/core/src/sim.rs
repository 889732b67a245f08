//! Receding-horizon fictitious play among agents with private level-2
//! parameters, noisy observation of the executed behavior, and lane-change
//! outcome metrics.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{EquilibriumSolver, SolveStats, WarmStart};
use crate::error::{Error, Result};
use crate::game::{ParameterizedGame, TrajectoryBundle};
use crate::observation::{ObservationModel, ObservationSequence, ObservedQuantity};
use crate::params::Level2ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub sim_steps: usize,
    pub plan_horizon: usize,
    pub replan_every: usize,
    /// Standard deviation of the position noise, in meters.
    pub noise_c: f64,
    pub seed: u64,
    pub on_solver_failure: FailurePolicy,
}

/// What an agent does when its replanning solve fails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// Stop the simulation and return the partial record.
    #[default]
    Abort,
    /// Execute the solver's final iterate as the plan. Such solves are
    /// marked by their status in `solver_stats`.
    BestEffort,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            sim_steps: 150,
            plan_horizon: 15,
            replan_every: 3,
            noise_c: 0.1,
            seed: 42,
            on_solver_failure: FailurePolicy::Abort,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if self.replan_every == 0 || self.replan_every > self.plan_horizon {
            return Err(Error::InvalidConfig(
                "replan_every must lie in 1..=plan_horizon".into(),
            ));
        }
        if self.sim_steps < self.plan_horizon {
            return Err(Error::InvalidConfig(
                "sim_steps must be at least plan_horizon".into(),
            ));
        }
        if !(self.noise_c >= 0.0) || !self.noise_c.is_finite() {
            return Err(Error::InvalidConfig(
                "noise_c must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// The plans computed at one replanning time.
#[derive(Clone, Debug, PartialEq)]
pub struct Replan {
    pub t: usize,
    /// Agent `i`'s hypothesized equilibrium of `Γ(Θ^{i*})`.
    pub plans: Vec<TrajectoryBundle>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveRecord {
    pub t: usize,
    pub agent: usize,
    pub stats: SolveStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimFailure {
    pub t: usize,
    pub agent: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct SimRecord {
    /// Executed joint states and controls; `controls[t]` moves
    /// `states[t]` to `states[t + 1]`.
    pub executed: TrajectoryBundle,
    pub replans: Vec<Replan>,
    pub solver_stats: Vec<SolveRecord>,
    /// Set when the simulation stopped early; `executed` then ends at the
    /// failing time.
    pub failure: Option<SimFailure>,
}

impl SimRecord {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Every `replan_every` steps each agent solves its own hypothesized game
/// from the current true state, warm-started from its previous plan, and
/// then executes its own controls from that plan until the next replan.
pub fn run_fictitious_play(
    game: &ParameterizedGame,
    ground_truth: &Level2ParamSet,
    settings: &SimSettings,
    solver: &dyn EquilibriumSolver,
) -> Result<SimRecord> {
    settings.validate()?;
    if ground_truth.n_agents() != game.n_agents() {
        return Err(Error::dims(
            "ground-truth rows",
            game.n_agents(),
            ground_truth.n_agents(),
        ));
    }
    let n_agents = game.n_agents();
    let plan_game = game.with_horizon(settings.plan_horizon)?;
    let mut x = game.x_init().clone();
    let mut states = Vec::with_capacity(settings.sim_steps);
    let mut controls = Vec::with_capacity(settings.sim_steps);
    let mut replans: Vec<Replan> = Vec::new();
    let mut solver_stats = Vec::new();
    // Each agent's plan in effect, its solution vector and its start time.
    let mut current: Vec<Option<(TrajectoryBundle, DVector<f64>, usize)>> = vec![None; n_agents];
    let mut failure = None;

    'sim: for t in 0..settings.sim_steps {
        if t % settings.replan_every == 0 {
            let g = plan_game.with_initial_state(x.clone())?;
            for i in 0..n_agents {
                let warm = current[i].as_ref().map(|(_, z, start)| WarmStart {
                    z,
                    shift: t - start,
                });
                let solved = match settings.on_solver_failure {
                    FailurePolicy::Abort => solver.solve(&g, ground_truth.row(i), warm),
                    FailurePolicy::BestEffort => {
                        solver.solve_best_effort(&g, ground_truth.row(i), warm)
                    }
                };
                match solved {
                    Ok(eq) => {
                        solver_stats.push(SolveRecord {
                            t,
                            agent: i,
                            stats: eq.stats,
                        });
                        current[i] = Some((eq.trajectory, eq.z, t));
                    }
                    Err(e) => {
                        debug!("fictitious play aborted at t = {t}, agent {i}: {e}");
                        failure = Some(SimFailure {
                            t,
                            agent: i,
                            message: e.to_string(),
                        });
                        break 'sim;
                    }
                }
            }
            replans.push(Replan {
                t,
                plans: current
                    .iter()
                    .map(|c| c.as_ref().expect("every agent has a plan").0.clone())
                    .collect(),
            });
        }
        let mut u = DVector::zeros(game.control_dim());
        for (i, plan) in current.iter().enumerate() {
            let (plan, _, start) = plan.as_ref().expect("every agent has a plan");
            let block = game.control_block(i);
            u.rows_mut(block.start, block.len())
                .copy_from(&plan.controls[t - start].rows(block.start, block.len()));
        }
        states.push(x.clone());
        x = game.step_dynamics(&x, &u)?;
        controls.push(u);
    }
    Ok(SimRecord {
        executed: TrajectoryBundle::new(states, controls),
        replans,
        solver_stats,
        failure,
    })
}

/// Noisy observations `o^i_t = G^i x_t + c ζ` of an executed trajectory,
/// with `ζ` standard normal drawn in `(t, agent, axis)` order from a
/// generator seeded by `seed`. `available[t][i] = false` removes an entry
/// (its noise is still drawn, so the rest of the sequence is unchanged).
pub fn observe(
    record: &SimRecord,
    model: &ObservationModel,
    noise_c: f64,
    seed: u64,
    available: Option<&[Vec<bool>]>,
) -> Result<ObservationSequence> {
    if model.quantity != ObservedQuantity::State {
        return Err(Error::Precondition(
            "simulated observations are of the state".into(),
        ));
    }
    if !(noise_c >= 0.0) {
        return Err(Error::InvalidConfig("noise_c must be nonnegative".into()));
    }
    let executed = &record.executed;
    if let Some(a) = available {
        if a.len() != executed.len() {
            return Err(Error::dims("availability steps", executed.len(), a.len()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(executed.len());
    for (t, x) in executed.states.iter().enumerate() {
        let mut row = Vec::with_capacity(model.n_agents());
        for i in 0..model.n_agents() {
            let mut o = &model.maps[i] * x;
            for v in o.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_c * z;
            }
            let keep = available.is_none_or(|a| a[t].get(i).copied().unwrap_or(false));
            row.push(keep.then_some(o));
        }
        entries.push(row);
    }
    ObservationSequence::new(model.clone(), entries)
}

/// First 1-based step `t` from which the coordinate `index` of the joint
/// state stays within `tol` of `target` until the end of the record.
pub fn settle_time(record: &SimRecord, index: usize, target: f64, tol: f64) -> Option<usize> {
    let states = &record.executed.states;
    let mut first = None;
    for (t, x) in states.iter().enumerate().rev() {
        if (x[index] - target).abs() <= tol {
            first = Some(t + 1);
        } else {
            break;
        }
    }
    first
}

/// Lane-change time of `agent`: when its lateral position (the first
/// entry of its state block) settles within `tol` of `target_lat`.
pub fn lane_change_time(
    record: &SimRecord,
    game: &ParameterizedGame,
    agent: usize,
    target_lat: f64,
    tol: f64,
) -> Option<usize> {
    settle_time(record, game.state_block(agent).start, target_lat, tol)
}

/// Seed of sweep instance `index`, derived from the base seed.
pub fn instance_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// Initial-state estimate for a window of position observations of agents
/// with `[position, velocity]` state blocks (planar double integrators).
///
/// Each position coordinate is fitted by least squares with a
/// constant-acceleration curve over the window's observations, and the
/// curve's position and velocity at the window's first step form the
/// estimate. Fewer than three observations reduce the fit to a line or a
/// constant.
#[derive(Clone, Debug)]
pub struct WindowStateEstimator {
    pub dt: f64,
    /// Start of each agent's state block in the joint state.
    pub block_starts: Vec<usize>,
    pub state_dim: usize,
}

impl WindowStateEstimator {
    pub fn for_game(game: &ParameterizedGame, dt: f64) -> Self {
        Self {
            dt,
            block_starts: (0..game.n_agents())
                .map(|i| game.state_block(i).start)
                .collect(),
            state_dim: game.state_dim(),
        }
    }

    pub fn estimate(&self, window: &ObservationSequence) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.state_dim);
        for (i, &start) in self.block_starts.iter().enumerate() {
            let samples: Vec<(f64, &DVector<f64>)> = (0..window.len())
                .filter_map(|t| window.get(t, i).map(|o| (t as f64 * self.dt, o)))
                .collect();
            let Some(&(_, first)) = samples.first() else {
                return Err(Error::Precondition(format!(
                    "no observation of agent {i} in the window"
                )));
            };
            let d = first.len();
            let order = samples.len().min(3);
            let design = DMatrix::from_fn(samples.len(), order, |r, c| {
                samples[r].0.powi(c as i32) / [1.0, 1.0, 2.0][c]
            });
            let svd = design.svd(true, true);
            for k in 0..d {
                let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1[k]));
                let coef = svd
                    .solve(&y, 1e-12)
                    .map_err(|e| Error::Precondition(format!("window fit failed: {e}")))?;
                x[start + k] = coef[0];
                if order > 1 {
                    x[start + d + k] = coef[1];
                }
            }
        }
        Ok(x)
    }
}
