//! Level-2 inverse games: fit every agent's objective and every agent's
//! estimates of the others' objectives to observed behavior by projected
//! gradient descent through the equilibrium solver.

use log::{debug, warn};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{Equilibrium, EquilibriumSolver, WarmStart};
use crate::error::{Error, Result};
use crate::game::ParameterizedGame;
use crate::observation::{ObservationSequence, ObservedQuantity};
use crate::params::{flatten_row, unflatten_row, AgentParams, Level2ParamSet};

pub use crate::linalg::project_psd;

/// Armijo sufficient-decrease constant of the backtracking line search.
const ARMIJO: f64 = 1e-4;
/// Retries after a failed equilibrium solve in fixed-step mode.
const FAILURE_RETRIES: usize = 5;
/// Backtracking stops once the step has shrunk by this factor.
const MIN_STEP_RATIO: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    FixedStep,
    BacktrackingLineSearch,
}

/// Closed interval applied to every parameter entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseSettings {
    pub max_iter: usize,
    /// Initial step size `α`.
    pub step: f64,
    /// Backtracking factor `β`.
    pub decay: f64,
    /// Stop once the loss is at most this value.
    pub threshold: f64,
    pub mode: StepMode,
    /// Project every cost parameter block onto its admissible set (PSD
    /// cost matrices for quadratic costs).
    pub psd_projection: bool,
    pub param_bounds: Option<ParamBounds>,
}

impl InverseSettings {
    /// Settings of the LQ experiments.
    pub fn lq() -> Self {
        Self {
            max_iter: 5000,
            step: 10.0,
            decay: 0.5,
            threshold: 0.0,
            mode: StepMode::BacktrackingLineSearch,
            psd_projection: true,
            param_bounds: None,
        }
    }

    /// Settings of the lane-change experiments.
    pub fn lane_change() -> Self {
        Self {
            max_iter: 40,
            step: 0.1,
            decay: 0.5,
            threshold: 0.1,
            mode: StepMode::FixedStep,
            psd_projection: false,
            param_bounds: Some(ParamBounds {
                lower: 0.0,
                upper: 4.0,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig(
                "inverse max_iter must be at least 1".into(),
            ));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidConfig("inverse step must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidConfig(
                "inverse decay must lie in (0, 1)".into(),
            ));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidConfig(
                "inverse threshold must be nonnegative".into(),
            ));
        }
        if let Some(b) = self.param_bounds {
            if !(b.lower <= b.upper) {
                return Err(Error::InvalidConfig(
                    "parameter bounds must satisfy lower <= upper".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseStatus {
    /// The loss reached the threshold.
    Converged,
    /// The iteration budget ran out, or repeated solve failures stopped
    /// the descent.
    MaxIterations,
    /// No step along the (projected) negative gradient decreases the loss.
    Stationary,
}

#[derive(Clone, Debug)]
pub struct InverseResult {
    pub theta_hat: Level2ParamSet,
    /// Loss at the initial point followed by the loss after every accepted
    /// step.
    pub loss_history: Vec<f64>,
    pub status: InverseStatus,
    /// Hypothesized equilibrium of every agent at `theta_hat`.
    pub per_agent_solutions: Vec<Equilibrium>,
    /// Gradient evaluations in which some agent's contribution was zeroed
    /// because strict complementarity failed.
    pub degenerate_gradients: usize,
}

impl InverseResult {
    pub fn final_loss(&self) -> f64 {
        *self
            .loss_history
            .last()
            .expect("history holds the initial loss")
    }

    /// Number of accepted descent steps.
    pub fn iterations(&self) -> usize {
        self.loss_history.len() - 1
    }
}

fn check_observations(game: &ParameterizedGame, observations: &ObservationSequence) -> Result<()> {
    if observations.len() != game.horizon() {
        return Err(Error::dims(
            "observed steps",
            game.horizon(),
            observations.len(),
        ));
    }
    if observations.model().n_agents() != game.n_agents() {
        return Err(Error::dims(
            "observation maps",
            game.n_agents(),
            observations.model().n_agents(),
        ));
    }
    Ok(())
}

/// Misfit of agent `i`'s own observations against its hypothesized
/// equilibrium, and the derivative with respect to the trajectory prefix
/// `[X, U]`.
fn agent_misfit(
    game: &ParameterizedGame,
    observations: &ObservationSequence,
    agent: usize,
    eq: &Equilibrium,
) -> (f64, DVector<f64>) {
    let (n, m, horizon) = (game.state_dim(), game.control_dim(), game.horizon());
    let model = observations.model();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(horizon * (n + m));
    for t in 0..horizon {
        let Some(o) = observations.get(t, agent) else {
            continue;
        };
        let (x, u) = (&eq.trajectory.states[t], &eq.trajectory.controls[t]);
        let r = model.observe(agent, x, u) - o;
        loss += 0.5 * r.norm_squared();
        let g = model.maps[agent].transpose() * r;
        let start = match model.quantity {
            ObservedQuantity::State => t * n,
            ObservedQuantity::Control => horizon * n + t * m,
        };
        let mut seg = grad.rows_mut(start, g.len());
        seg += g;
    }
    (loss, grad)
}

fn solve_all(
    game: &ParameterizedGame,
    theta: &Level2ParamSet,
    solver: &dyn EquilibriumSolver,
    warm: Option<(&[Equilibrium], usize)>,
) -> Result<Vec<Equilibrium>> {
    if theta.n_agents() != game.n_agents() {
        return Err(Error::dims(
            "parameter rows",
            game.n_agents(),
            theta.n_agents(),
        ));
    }
    (0..theta.n_agents())
        .into_par_iter()
        .map(|i| {
            let w = warm.map(|(sols, shift)| WarmStart {
                z: &sols[i].z,
                shift,
            });
            solver
                .solve(game, theta.row(i), w)
                .map_err(|e| e.for_agent(i))
        })
        .collect()
}

fn loss_of(
    game: &ParameterizedGame,
    observations: &ObservationSequence,
    solutions: &[Equilibrium],
) -> f64 {
    solutions
        .iter()
        .enumerate()
        .map(|(i, eq)| agent_misfit(game, observations, i, eq).0)
        .sum()
}

fn evaluate(
    game: &ParameterizedGame,
    theta: &Level2ParamSet,
    observations: &ObservationSequence,
    solver: &dyn EquilibriumSolver,
    warm: Option<(&[Equilibrium], usize)>,
) -> Result<(f64, Vec<Equilibrium>)> {
    let solutions = solve_all(game, theta, solver, warm)?;
    Ok((loss_of(game, observations, &solutions), solutions))
}

/// `Σ_t Σ_i ½‖G^i(x^{i,i}_t) − o^i_t‖²`, each term evaluated on agent
/// `i`'s hypothesized equilibrium of `Γ(Θ̂ⁱ)`. Missing observations
/// contribute nothing.
pub fn level2_loss(
    game: &ParameterizedGame,
    theta: &Level2ParamSet,
    observations: &ObservationSequence,
    solver: &dyn EquilibriumSolver,
) -> Result<(f64, Vec<Equilibrium>)> {
    check_observations(game, observations)?;
    evaluate(game, theta, observations, solver, None)
}

/// Gradient of [`level2_loss`] over the flattened parameter set.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub gradient: DVector<f64>,
    /// Agents whose block was zeroed because strict complementarity failed
    /// at their equilibrium.
    pub degenerate_agents: Vec<usize>,
}

/// Chain rule through each agent's equilibrium sensitivity. Row `i` of the
/// gradient only involves `Γ(Θ̂ⁱ)`; agents are processed in parallel.
/// An agent whose equilibrium violates strict complementarity contributes a
/// zero block and a warning.
pub fn level2_loss_gradient(
    game: &ParameterizedGame,
    theta: &Level2ParamSet,
    observations: &ObservationSequence,
    solver: &dyn EquilibriumSolver,
    solutions: &[Equilibrium],
) -> Result<LossGradient> {
    check_observations(game, observations)?;
    if solutions.len() != theta.n_agents() {
        return Err(Error::dims(
            "per-agent solutions",
            theta.n_agents(),
            solutions.len(),
        ));
    }
    let row_dim = theta.row_dim();
    let blocks: Vec<Result<Option<DVector<f64>>>> = (0..theta.n_agents())
        .into_par_iter()
        .map(|i| {
            let (_, dl) = agent_misfit(game, observations, i, &solutions[i]);
            if dl.iter().all(|v| *v == 0.0) {
                return Ok(Some(DVector::zeros(row_dim)));
            }
            match solver.trajectory_sensitivity(game, theta.row(i), &solutions[i]) {
                Ok(s) => Ok(Some(s.transpose() * dl)),
                Err(Error::Degenerate { indices }) => {
                    warn!(
                        "agent {i}: {} degenerate complementarity indices, gradient block set to zero",
                        indices.len()
                    );
                    Ok(None)
                }
                Err(e) => Err(e.for_agent(i)),
            }
        })
        .collect();
    let mut gradient = DVector::zeros(theta.dim());
    let mut degenerate_agents = Vec::new();
    for (i, b) in blocks.into_iter().enumerate() {
        match b? {
            Some(g) => gradient.rows_mut(i * row_dim, row_dim).copy_from(&g),
            None => degenerate_agents.push(i),
        }
    }
    Ok(LossGradient {
        gradient,
        degenerate_agents,
    })
}

/// How the descent variable maps onto a parameter set.
#[derive(Clone)]
enum Manifold {
    /// Every entry of the level-2 set is free.
    Full(Level2ParamSet),
    /// One row shared by all agents.
    Homogeneous { n_agents: usize, dims: Vec<usize> },
}

impl Manifold {
    fn to_set(&self, v: &DVector<f64>) -> Result<Level2ParamSet> {
        match self {
            Manifold::Full(template) => template.with_flat(v.as_slice()),
            Manifold::Homogeneous { n_agents, dims } => {
                let row = unflatten_row(v.as_slice(), dims)?;
                Level2ParamSet::new(vec![row; *n_agents])
            }
        }
    }

    fn pull_back(&self, full_gradient: &DVector<f64>) -> DVector<f64> {
        match self {
            Manifold::Full(_) => full_gradient.clone(),
            Manifold::Homogeneous { n_agents, dims } => {
                let row_dim: usize = dims.iter().sum();
                let mut g = DVector::zeros(row_dim);
                for i in 0..*n_agents {
                    g += full_gradient.rows(i * row_dim, row_dim);
                }
                g
            }
        }
    }
}

/// Maps every block onto its cost's admissible set, then clips to the box.
fn project(
    game: &ParameterizedGame,
    settings: &InverseSettings,
    theta: &Level2ParamSet,
) -> Result<Level2ParamSet> {
    let rows = theta
        .rows()
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, p)| {
                    let mut v = p.values().to_vec();
                    if settings.psd_projection {
                        game.cost(j).project_params(&mut v);
                    }
                    if let Some(b) = settings.param_bounds {
                        for x in v.iter_mut() {
                            *x = x.clamp(b.lower, b.upper);
                        }
                    }
                    AgentParams::new(v)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Level2ParamSet::new(rows)
}

struct Descent<'a> {
    game: &'a ParameterizedGame,
    observations: &'a ObservationSequence,
    settings: &'a InverseSettings,
    solver: &'a dyn EquilibriumSolver,
    manifold: Manifold,
}

struct Iterate {
    v: DVector<f64>,
    theta: Level2ParamSet,
    loss: f64,
    solutions: Vec<Equilibrium>,
}

impl Descent<'_> {
    fn point(&self, v: &DVector<f64>, warm: Option<(&[Equilibrium], usize)>) -> Result<Iterate> {
        let theta = project(self.game, self.settings, &self.manifold.to_set(v)?)?;
        let v = match &self.manifold {
            Manifold::Full(_) => DVector::from_vec(theta.to_flat()),
            Manifold::Homogeneous { .. } => DVector::from_vec(theta.flat_row(0)),
        };
        let (loss, solutions) = evaluate(self.game, &theta, self.observations, self.solver, warm)?;
        Ok(Iterate {
            v,
            theta,
            loss,
            solutions,
        })
    }

    /// One accepted step, or `Err(status)` when the descent must stop.
    fn step(
        &self,
        current: &Iterate,
        g: &DVector<f64>,
    ) -> std::result::Result<Iterate, InverseStatus> {
        let warm = Some((current.solutions.as_slice(), 0));
        let mut alpha = self.settings.step;
        match self.settings.mode {
            StepMode::FixedStep => {
                for attempt in 0..=FAILURE_RETRIES {
                    match self.point(&(&current.v - g * alpha), warm) {
                        Ok(next) => return Ok(next),
                        Err(e) => {
                            debug!("step rejected on attempt {attempt} (alpha {alpha:e}): {e}");
                            alpha *= 0.5;
                        }
                    }
                }
                warn!("equilibrium solves failed after {FAILURE_RETRIES} step halvings; stopping");
                Err(InverseStatus::MaxIterations)
            }
            StepMode::BacktrackingLineSearch => {
                while alpha >= self.settings.step * MIN_STEP_RATIO {
                    match self.point(&(&current.v - g * alpha), warm) {
                        Ok(next) => {
                            let slope = g.dot(&(&next.v - &current.v)).min(0.0);
                            if next.loss <= current.loss + ARMIJO * slope {
                                return Ok(next);
                            }
                        }
                        Err(e) => debug!("trial step rejected (alpha {alpha:e}): {e}"),
                    }
                    alpha *= self.settings.decay;
                }
                Err(InverseStatus::Stationary)
            }
        }
    }

    fn run(
        &self,
        v0: DVector<f64>,
        warm: Option<(&[Equilibrium], usize)>,
    ) -> Result<InverseResult> {
        self.settings.validate()?;
        check_observations(self.game, self.observations)?;
        let mut current = self.point(&v0, warm)?;
        let mut history = vec![current.loss];
        let mut degenerate_gradients = 0;
        let mut status = InverseStatus::MaxIterations;
        for k in 0..self.settings.max_iter {
            if current.loss <= self.settings.threshold {
                status = InverseStatus::Converged;
                break;
            }
            let lg = level2_loss_gradient(
                self.game,
                &current.theta,
                self.observations,
                self.solver,
                &current.solutions,
            )?;
            if !lg.degenerate_agents.is_empty() {
                degenerate_gradients += 1;
            }
            let g = self.manifold.pull_back(&lg.gradient);
            if g.iter().all(|v| *v == 0.0) {
                status = InverseStatus::Stationary;
                break;
            }
            match self.step(&current, &g) {
                Ok(next) => {
                    debug!("iteration {k}: loss {:e} -> {:e}", current.loss, next.loss);
                    current = next;
                    history.push(current.loss);
                }
                Err(s) => {
                    status = s;
                    break;
                }
            }
        }
        if current.loss <= self.settings.threshold {
            status = InverseStatus::Converged;
        }
        Ok(InverseResult {
            theta_hat: current.theta,
            loss_history: history,
            status,
            per_agent_solutions: current.solutions,
            degenerate_gradients,
        })
    }
}

/// Projected gradient descent on the level-2 loss starting from `theta0`.
///
/// A failed equilibrium solve at `theta0` is fatal. Later failures reject
/// the trial step: fixed-step mode halves the step up to five times before
/// giving up, the line search treats the failure as insufficient decrease.
pub fn solve_inverse(
    game: &ParameterizedGame,
    observations: &ObservationSequence,
    theta0: &Level2ParamSet,
    settings: &InverseSettings,
    solver: &dyn EquilibriumSolver,
) -> Result<InverseResult> {
    solve_inverse_warm(game, observations, theta0, settings, solver, None)
}

/// [`solve_inverse`] with the first equilibrium solves warm-started from
/// `warm`, solved `shift` steps earlier.
pub fn solve_inverse_warm(
    game: &ParameterizedGame,
    observations: &ObservationSequence,
    theta0: &Level2ParamSet,
    settings: &InverseSettings,
    solver: &dyn EquilibriumSolver,
    warm: Option<(&[Equilibrium], usize)>,
) -> Result<InverseResult> {
    let descent = Descent {
        game,
        observations,
        settings,
        solver,
        manifold: Manifold::Full(theta0.clone()),
    };
    descent.run(DVector::from_vec(theta0.to_flat()), warm)
}

/// Inverse game restricted to homogeneous parameter sets (level-1
/// inference): a single row shared by all agents, whose gradient is the
/// sum of the level-2 gradient's row blocks.
pub fn solve_inverse_level1(
    game: &ParameterizedGame,
    observations: &ObservationSequence,
    theta0_row: &[AgentParams],
    settings: &InverseSettings,
    solver: &dyn EquilibriumSolver,
) -> Result<InverseResult> {
    solve_inverse_level1_warm(game, observations, theta0_row, settings, solver, None)
}

pub fn solve_inverse_level1_warm(
    game: &ParameterizedGame,
    observations: &ObservationSequence,
    theta0_row: &[AgentParams],
    settings: &InverseSettings,
    solver: &dyn EquilibriumSolver,
    warm: Option<(&[Equilibrium], usize)>,
) -> Result<InverseResult> {
    game.check_row(theta0_row)?;
    let descent = Descent {
        game,
        observations,
        settings,
        solver,
        manifold: Manifold::Homogeneous {
            n_agents: game.n_agents(),
            dims: theta0_row.iter().map(|p| p.dim()).collect(),
        },
    };
    descent.run(DVector::from_vec(flatten_row(theta0_row)), warm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    Level1,
    Level2,
}

/// Estimate produced after observing steps `[end - window, end)`.
#[derive(Clone, Debug)]
pub struct OnlineEstimate {
    /// Number of observed steps so far.
    pub end: usize,
    pub theta: Level2ParamSet,
    pub loss: f64,
    pub iterations: usize,
    pub status: Option<InverseStatus>,
    /// Error of a failed window; the previous estimate is carried forward.
    pub failure: Option<String>,
}

/// Receding-horizon inference over a stream: for each `end` from `window`
/// to the stream length, the inverse game is solved on the most recent
/// `window` observations, warm-started from the previous estimate and
/// equilibria. `initial_state` supplies the game's initial state for each
/// window of observations.
///
/// `game` must have horizon `window`. In level-1 mode `theta0` must be
/// homogeneous and only its first row is used.
pub fn online_infer(
    game: &ParameterizedGame,
    stream: &ObservationSequence,
    mode: InferenceMode,
    settings: &InverseSettings,
    theta0: &Level2ParamSet,
    solver: &dyn EquilibriumSolver,
    initial_state: &dyn Fn(&ObservationSequence) -> Result<DVector<f64>>,
) -> Result<Vec<OnlineEstimate>> {
    let window = game.horizon();
    if stream.len() < window {
        return Err(Error::Precondition(format!(
            "observation stream of {} steps is shorter than the window of {window}",
            stream.len()
        )));
    }
    if mode == InferenceMode::Level1 && !theta0.is_homogeneous() {
        return Err(Error::Precondition(
            "level-1 inference needs a homogeneous initial estimate".into(),
        ));
    }
    settings.validate()?;
    let mut theta = theta0.clone();
    let mut previous: Option<Vec<Equilibrium>> = None;
    let mut out = Vec::with_capacity(stream.len() - window + 1);
    for end in window..=stream.len() {
        let obs = stream.window(end - window, window)?;
        let attempt = initial_state(&obs)
            .and_then(|x0| game.with_initial_state(x0))
            .and_then(|g| {
                let warm = previous.as_deref().map(|p| (p, 1));
                match mode {
                    InferenceMode::Level2 => {
                        solve_inverse_warm(&g, &obs, &theta, settings, solver, warm)
                    }
                    InferenceMode::Level1 => {
                        solve_inverse_level1_warm(&g, &obs, theta.row(0), settings, solver, warm)
                    }
                }
            });
        match attempt {
            Ok(res) => {
                debug!(
                    "window ending at {end}: loss {:.4e} after {} steps ({:?})",
                    res.final_loss(),
                    res.iterations(),
                    res.status
                );
                theta = res.theta_hat.clone();
                out.push(OnlineEstimate {
                    end,
                    loss: res.final_loss(),
                    iterations: res.iterations(),
                    theta: res.theta_hat,
                    status: Some(res.status),
                    failure: None,
                });
                previous = Some(res.per_agent_solutions);
            }
            Err(e) => {
                warn!("window ending at {end} failed: {e}");
                out.push(OnlineEstimate {
                    end,
                    theta: theta.clone(),
                    loss: f64::NAN,
                    iterations: 0,
                    status: None,
                    failure: Some(e.to_string()),
                });
                previous = None;
            }
        }
    }
    Ok(out)
}
