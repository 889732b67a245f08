//! Parameterized dynamic games and trajectories.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DVector;

use crate::constraints::ConstraintSet;
use crate::cost::StageCost;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::params::AgentParams;

/// `Γ(Θ)`: dynamics, per-agent parameterized costs, constraints, horizon
/// and initial state. Parameters are supplied separately, one row of a
/// [`crate::params::Level2ParamSet`] at a time.
#[derive(Clone, Debug)]
pub struct ParameterizedGame {
    dynamics: DynamicsModel,
    costs: Vec<Arc<dyn StageCost>>,
    constraints: ConstraintSet,
    horizon: usize,
    x_init: DVector<f64>,
}

impl ParameterizedGame {
    pub fn new(
        dynamics: DynamicsModel,
        costs: Vec<Arc<dyn StageCost>>,
        constraints: ConstraintSet,
        horizon: usize,
        x_init: DVector<f64>,
    ) -> Result<Self> {
        let n_agents = dynamics.n_agents();
        if n_agents == 0 {
            return Err(Error::Precondition(
                "a game needs at least one agent".into(),
            ));
        }
        if costs.len() != n_agents {
            return Err(Error::dims("cost models", n_agents, costs.len()));
        }
        if constraints.equality.len() != n_agents || constraints.inequality.len() != n_agents {
            return Err(Error::dims(
                "per-agent constraint lists",
                n_agents,
                constraints.equality.len().min(constraints.inequality.len()),
            ));
        }
        if horizon < 2 {
            return Err(Error::Precondition(format!(
                "horizon must be at least 2, got {horizon}"
            )));
        }
        if x_init.len() != dynamics.state_dim() {
            return Err(Error::dims(
                "initial state",
                dynamics.state_dim(),
                x_init.len(),
            ));
        }
        Ok(Self {
            dynamics,
            costs,
            constraints,
            horizon,
            x_init,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.dynamics.n_agents()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn x_init(&self) -> &DVector<f64> {
        &self.x_init
    }

    pub fn dynamics(&self) -> &DynamicsModel {
        &self.dynamics
    }

    pub fn cost(&self, agent: usize) -> &Arc<dyn StageCost> {
        &self.costs[agent]
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dims(&self) -> Vec<usize> {
        self.dynamics.control_dims()
    }

    pub fn control_dim(&self) -> usize {
        self.control_dims().iter().sum()
    }

    /// Range of agent `i`'s control inside the joint control.
    pub fn control_block(&self, agent: usize) -> Range<usize> {
        let dims = self.control_dims();
        let start: usize = dims[..agent].iter().sum();
        start..start + dims[agent]
    }

    /// Range of the joint state describing agent `i`. With shared dynamics
    /// every agent sees the whole state.
    pub fn state_block(&self, agent: usize) -> Range<usize> {
        match &self.dynamics {
            DynamicsModel::SharedLinear { .. } => 0..self.state_dim(),
            DynamicsModel::PerAgent(_) => self.dynamics.blocks()[agent].range.clone(),
        }
    }

    pub fn param_dims(&self) -> Vec<usize> {
        self.costs.iter().map(|c| c.param_dim()).collect()
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::new(
            self.dynamics.clone(),
            self.costs.clone(),
            self.constraints.clone(),
            horizon,
            self.x_init.clone(),
        )
    }

    pub fn with_initial_state(&self, x_init: DVector<f64>) -> Result<Self> {
        Self::new(
            self.dynamics.clone(),
            self.costs.clone(),
            self.constraints.clone(),
            self.horizon,
            x_init,
        )
    }

    /// Checks that a parameter row matches the agents' parameter dimensions.
    pub fn check_row(&self, row: &[AgentParams]) -> Result<()> {
        if row.len() != self.n_agents() {
            return Err(Error::dims("parameter row", self.n_agents(), row.len()));
        }
        for (j, p) in row.iter().enumerate() {
            if p.dim() != self.costs[j].param_dim() {
                return Err(Error::dims(
                    "agent parameter",
                    self.costs[j].param_dim(),
                    p.dim(),
                ));
            }
        }
        Ok(())
    }

    pub fn step_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::dims("joint state", self.state_dim(), x.len()));
        }
        if u.len() != self.control_dim() {
            return Err(Error::dims("joint control", self.control_dim(), u.len()));
        }
        Ok(self.dynamics.step(x, u))
    }

    /// States visited from `x0` under `controls`; the result has one more
    /// entry than `controls`.
    pub fn rollout(
        &self,
        x0: &DVector<f64>,
        controls: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for u in controls {
            let next = self.step_dynamics(states.last().unwrap(), u)?;
            states.push(next);
        }
        Ok(states)
    }

    /// `J^i = Σ_t ℓ^i(x_t, u^i_t; θ̂^{i,i})`, reading only the agent's own
    /// parameter from the row.
    pub fn evaluate_cost(
        &self,
        trajectory: &TrajectoryBundle,
        agent: usize,
        row: &[AgentParams],
    ) -> Result<f64> {
        self.check_row(row)?;
        trajectory.check(self)?;
        let cost = &self.costs[agent];
        let theta = row[agent].values();
        let block = self.control_block(agent);
        Ok(trajectory
            .states
            .iter()
            .zip(&trajectory.controls)
            .map(|(x, u)| {
                let ui = u.rows(block.start, block.len()).into_owned();
                cost.value(x, &ui, theta)
            })
            .sum())
    }
}

/// Joint state and control trajectories `X = (x_0 … x_{T-1})` and
/// `U = (u_0 … u_{T-1})`, optionally with the per-agent hypothesized
/// equilibria that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBundle {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub hypothesized: Vec<TrajectoryBundle>,
}

impl TrajectoryBundle {
    pub fn new(states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Self {
        Self {
            states,
            controls,
            hypothesized: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check(&self, game: &ParameterizedGame) -> Result<()> {
        if self.states.len() != self.controls.len() {
            return Err(Error::dims(
                "trajectory controls",
                self.states.len(),
                self.controls.len(),
            ));
        }
        for x in &self.states {
            if x.len() != game.state_dim() {
                return Err(Error::dims("trajectory state", game.state_dim(), x.len()));
            }
        }
        for u in &self.controls {
            if u.len() != game.control_dim() {
                return Err(Error::dims(
                    "trajectory control",
                    game.control_dim(),
                    u.len(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{make_lane_change_game, make_lq_game, LaneChangeConfig};
    use nalgebra::DMatrix;

    fn lq() -> ParameterizedGame {
        let i2 = DMatrix::identity(2, 2);
        make_lq_game(
            i2.clone(),
            vec![i2.clone(), i2.clone()],
            vec![i2.clone(), i2],
            2,
            DVector::from_vec(vec![1.0, -1.0]),
        )
        .unwrap()
    }

    #[test]
    fn shared_linear_steps() {
        let g = lq();
        let x = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(g.step_dynamics(&x, &DVector::zeros(4)).unwrap(), x);
        let u = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.step_dynamics(&x, &u).unwrap().as_slice(), &[2.0, 0.0]);
        assert!(g.step_dynamics(&x, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn lane_cost_zero_on_lane_center_at_desired_speed() {
        let g = make_lane_change_game(&LaneChangeConfig::default()).unwrap();
        let x = DVector::from_vec(vec![1.0, 3.0, 0.0, 2.0, 3.0, 9.0, 0.0, 2.0]);
        let traj = TrajectoryBundle::new(vec![x; 3], vec![DVector::zeros(4); 3]);
        let row = vec![
            AgentParams::scalar(1.0).unwrap(),
            AgentParams::scalar(3.0).unwrap(),
        ];
        assert_eq!(g.evaluate_cost(&traj, 0, &row).unwrap(), 0.0);
        assert_eq!(g.evaluate_cost(&traj, 1, &row).unwrap(), 0.0);
    }

    #[test]
    fn zero_trajectory_has_zero_quadratic_cost() {
        let g = lq();
        let traj = TrajectoryBundle::new(vec![DVector::zeros(2); 2], vec![DVector::zeros(4); 2]);
        let row = vec![AgentParams::new(vec![1.0, 2.0, 0.3]).unwrap(); 2];
        assert_eq!(g.evaluate_cost(&traj, 1, &row).unwrap(), 0.0);
    }

    #[test]
    fn rejects_short_horizon() {
        assert!(lq().with_horizon(1).is_err());
    }
}
