//! Constructors for the LQ and lane-change games and their standard
//! parameter sets.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{BoxConstraint, BoxTarget, ConstraintSet, MinDistance, StageConstraint};
use crate::cost::{LaneTrackingCost, QuadraticCost, StageCost};
use crate::dynamics::{AgentDynamics, DynamicsModel, PlanarDoubleIntegrator};
use crate::error::{Error, Result};
use crate::game::ParameterizedGame;
use crate::params::Level2ParamSet;

/// Shared-linear game with stage costs `½ xᵀQ(θ^i)x + ½ u^{iᵀ}R^i u^i` and
/// `Q` packed by [`crate::cost::SymmetricParameterization`].
pub fn make_lq_game(
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    horizon: usize,
    x_init: DVector<f64>,
) -> Result<ParameterizedGame> {
    if b.len() != r.len() {
        return Err(Error::dims("control cost matrices", b.len(), r.len()));
    }
    for (bi, ri) in b.iter().zip(&r) {
        if ri.nrows() != bi.ncols() {
            return Err(Error::dims("control cost R rows", bi.ncols(), ri.nrows()));
        }
    }
    let n = a.nrows();
    let dynamics = DynamicsModel::shared_linear(a, b)?;
    let costs = r
        .into_iter()
        .map(|ri| Ok(Arc::new(QuadraticCost::new(n, ri)?) as Arc<dyn StageCost>))
        .collect::<Result<Vec<_>>>()?;
    let n_agents = costs.len();
    ParameterizedGame::new(
        dynamics,
        costs,
        ConstraintSet::unconstrained(n_agents),
        horizon,
        x_init,
    )
}

/// Two agents, `A = B^i = R^i = I₂`, given horizon and initial state.
pub fn identity_lq_game(horizon: usize, x_init: [f64; 2]) -> Result<ParameterizedGame> {
    let i2 = DMatrix::identity(2, 2);
    make_lq_game(
        i2.clone(),
        vec![i2.clone(), i2.clone()],
        vec![i2.clone(), i2],
        horizon,
        DVector::from_row_slice(&x_init),
    )
}

/// The two-step non-convexity instance with `x_0 = [1, −1]`.
pub fn counterexample_game() -> Result<ParameterizedGame> {
    identity_lq_game(2, [1.0, -1.0])
}

/// Ground truth of the non-convexity instance, `Q` blocks packed as
/// `[q11, q22, q12]`.
pub fn counterexample_truth() -> Level2ParamSet {
    Level2ParamSet::from_values(&[
        vec![vec![0.1, 0.1, 0.0], vec![1.0, 1.0, 0.0]],
        vec![vec![0.1, 0.1, 0.1], vec![1.0, 1.0, 1.0]],
    ])
    .expect("constant parameter set is well formed")
}

/// The ground truth with agent 1's own cost replaced by `[[1, c], [c, 1]]`.
pub fn counterexample_candidate(coupling: f64) -> Level2ParamSet {
    let truth = counterexample_truth();
    let mut flat = truth.to_flat();
    flat[..3].copy_from_slice(&[1.0, 1.0, coupling]);
    truth.with_flat(&flat).expect("same shape as the truth")
}

/// Heterogeneous LQ sweep ground truth at scale `s`:
/// `Θ¹ = [1, 1, −1, 10, 10s, 1]`, `Θ² = [10, 10, 1, 1, 1, −1]`.
pub fn lq_sweep_truth(s: f64) -> Level2ParamSet {
    Level2ParamSet::from_values(&[
        vec![vec![1.0, 1.0, -1.0], vec![10.0, 10.0 * s, 1.0]],
        vec![vec![10.0, 10.0, 1.0], vec![1.0, 1.0, -1.0]],
    ])
    .expect("constant parameter set is well formed")
}

/// Two agents whose cost matrices are all the identity.
pub fn identity_q_params() -> Level2ParamSet {
    Level2ParamSet::from_values(&[
        vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]],
        vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]],
    ])
    .expect("constant parameter set is well formed")
}

/// Constants of the two-vehicle lane-change scenario. Positions are in
/// meters with the lateral axis measured from the top road boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaneChangeConfig {
    pub lane_width: f64,
    pub dt: f64,
    pub mass: f64,
    /// Lane tracking, velocity tracking and control effort weights.
    pub weights: [f64; 3],
    pub desired_velocity: [f64; 2],
    pub safety_buffer: f64,
    pub horizon: usize,
    pub lat_bounds: [f64; 2],
    pub lon_bounds: [f64; 2],
    pub v_lat_bounds: [f64; 2],
    pub v_lon_bounds: [f64; 2],
    pub force_bounds: [f64; 2],
    /// Per-vehicle initial `[p_lat, p_lon, v_lat, v_lon]`.
    pub initial_states: [[f64; 4]; 2],
}

impl Default for LaneChangeConfig {
    fn default() -> Self {
        Self {
            lane_width: 2.0,
            dt: 0.1,
            mass: 1.0,
            weights: [1.0, 0.5, 0.1],
            desired_velocity: [0.0, 2.0],
            safety_buffer: 2.0,
            horizon: 15,
            lat_bounds: [0.0, 4.0],
            lon_bounds: [0.0, 50.0],
            v_lat_bounds: [-10.0, 10.0],
            v_lon_bounds: [0.0, 10.0],
            force_bounds: [-5.0, 3.0],
            initial_states: [[1.0, 1.0, 0.0, 1.0], [3.2, 0.9, 0.0, 1.0]],
        }
    }
}

impl LaneChangeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lane_width > 0.0) {
            return fail(format!(
                "lane_width must be positive, got {}",
                self.lane_width
            ));
        }
        if !(self.safety_buffer > 0.0) {
            return fail(format!(
                "safety_buffer must be positive, got {}",
                self.safety_buffer
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return fail("cost weights must be positive".into());
        }
        for (name, b) in [
            ("lat_bounds", self.lat_bounds),
            ("lon_bounds", self.lon_bounds),
            ("v_lat_bounds", self.v_lat_bounds),
            ("v_lon_bounds", self.v_lon_bounds),
            ("force_bounds", self.force_bounds),
        ] {
            if !(b[0] <= b[1]) {
                return fail(format!("{name} lower bound exceeds upper bound"));
            }
        }
        if self.horizon < 2 {
            return fail(format!("horizon must be at least 2, got {}", self.horizon));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_iterator(8, self.initial_states.iter().flatten().copied())
    }

    /// Center of the top lane.
    pub fn top_lane_center(&self) -> f64 {
        self.lane_width / 2.0
    }
}

/// Two planar double integrators sharing a minimum-distance constraint,
/// each tracking a parameterized lateral offset. Each vehicle's state and
/// force bounds are private to that vehicle.
pub fn make_lane_change_game(config: &LaneChangeConfig) -> Result<ParameterizedGame> {
    config.validate()?;
    let (n, m) = (8, 4);
    let vehicle: Arc<dyn AgentDynamics> =
        Arc::new(PlanarDoubleIntegrator::new(config.dt, config.mass)?);
    let dynamics = DynamicsModel::PerAgent(vec![vehicle.clone(), vehicle]);
    let collision: Arc<dyn StageConstraint> = Arc::new(MinDistance {
        a: [0, 1],
        b: [4, 5],
        delta: config.safety_buffer,
        state_dim: n,
        control_dim: m,
    });
    let mut costs: Vec<Arc<dyn StageCost>> = Vec::new();
    let mut inequality = Vec::new();
    for agent in 0..2 {
        let s = 4 * agent;
        costs.push(Arc::new(LaneTrackingCost {
            lat_index: s,
            vel_indices: [s + 2, s + 3],
            weights: config.weights,
            desired_velocity: config.desired_velocity,
        }));
        let bounds = [
            config.lat_bounds,
            config.lon_bounds,
            config.v_lat_bounds,
            config.v_lon_bounds,
        ];
        let states = BoxConstraint::new(
            BoxTarget::State,
            &[s, s + 1, s + 2, s + 3],
            &bounds.map(|b| b[0]),
            &bounds.map(|b| b[1]),
            n,
            m,
        )?;
        let c = 2 * agent;
        let controls = BoxConstraint::new(
            BoxTarget::Control,
            &[c, c + 1],
            &[config.force_bounds[0]; 2],
            &[config.force_bounds[1]; 2],
            n,
            m,
        )?;
        inequality.push(vec![
            Arc::new(states) as Arc<dyn StageConstraint>,
            Arc::new(controls) as Arc<dyn StageConstraint>,
        ]);
    }
    let constraints = ConstraintSet {
        equality: vec![Vec::new(), Vec::new()],
        inequality,
        shared_inequality: vec![collision],
    };
    ParameterizedGame::new(
        dynamics,
        costs,
        constraints,
        config.horizon,
        config.initial_state(),
    )
}

/// Lane-change parameter set from own targets and mutual estimates:
/// row 1 is `[θ^{1,1}, θ^{1,2}]`, row 2 is `[θ^{2,1}, θ^{2,2}]`.
pub fn lane_params(
    own: [f64; 2],
    estimate_1_of_2: f64,
    estimate_2_of_1: f64,
) -> Result<Level2ParamSet> {
    Level2ParamSet::from_values(&[
        vec![vec![own[0]], vec![estimate_1_of_2]],
        vec![vec![estimate_2_of_1], vec![own[1]]],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lane_change_defaults_build() {
        let g = make_lane_change_game(&LaneChangeConfig::default()).unwrap();
        assert_eq!(g.n_agents(), 2);
        assert_eq!(g.state_dim(), 8);
        assert_eq!(g.control_dim(), 4);
        assert_eq!(g.state_block(1), 4..8);
        let minimal = LaneChangeConfig {
            horizon: 2,
            ..Default::default()
        };
        assert_eq!(make_lane_change_game(&minimal).unwrap().horizon(), 2);
    }

    #[test]
    fn lane_change_rejects_degenerate_buffer_and_lane() {
        let zero_buffer = LaneChangeConfig {
            safety_buffer: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            make_lane_change_game(&zero_buffer),
            Err(Error::InvalidConfig(_))
        ));
        let zero_lane = LaneChangeConfig {
            lane_width: 0.0,
            ..Default::default()
        };
        assert!(make_lane_change_game(&zero_lane).is_err());
    }

    #[test]
    fn lq_game_validates_inputs() {
        let i2 = DMatrix::identity(2, 2);
        let bad_r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            make_lq_game(
                i2.clone(),
                vec![i2.clone()],
                vec![bad_r],
                2,
                DVector::zeros(2)
            ),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(make_lq_game(
            i2.clone(),
            vec![i2.clone()],
            vec![i2.clone()],
            2,
            DVector::zeros(3)
        )
        .is_err());
        let scalar = DMatrix::identity(1, 1);
        let g = make_lq_game(
            scalar.clone(),
            vec![scalar.clone()],
            vec![scalar],
            2,
            DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(g.n_agents(), 1);
    }

    #[test]
    fn standard_parameter_sets() {
        let truth = counterexample_truth();
        assert!(!truth.is_homogeneous());
        assert_eq!(
            counterexample_candidate(0.8).flat_row(0)[..3],
            [1.0, 1.0, 0.8]
        );
        assert_eq!(counterexample_candidate(0.8).row(1), truth.row(1));
        assert_eq!(lq_sweep_truth(2.0).flat_row(0)[4], 20.0);
    }
}
