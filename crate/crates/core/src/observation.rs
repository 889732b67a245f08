//! Observation maps and (possibly incomplete) observation sequences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{ParameterizedGame, TrajectoryBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservedQuantity {
    State,
    Control,
}

/// Linear maps `o^i_t = G^i y_t`, where `y_t` is the joint state or joint
/// control at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationModel {
    pub quantity: ObservedQuantity,
    pub maps: Vec<DMatrix<f64>>,
}

impl ObservationModel {
    /// Each agent's own control, unmodified.
    pub fn own_controls(game: &ParameterizedGame) -> Self {
        let m = game.control_dim();
        let maps = (0..game.n_agents())
            .map(|i| selector(game.control_block(i), m))
            .collect();
        Self {
            quantity: ObservedQuantity::Control,
            maps,
        }
    }

    /// Selected entries of each agent's own state block, given as offsets
    /// within the block (e.g. `[0, 1]` for planar position).
    pub fn own_state_entries(game: &ParameterizedGame, offsets: &[usize]) -> Self {
        let n = game.state_dim();
        let maps = (0..game.n_agents())
            .map(|i| {
                let start = game.state_block(i).start;
                let mut g = DMatrix::zeros(offsets.len(), n);
                for (r, &o) in offsets.iter().enumerate() {
                    g[(r, start + o)] = 1.0;
                }
                g
            })
            .collect();
        Self {
            quantity: ObservedQuantity::State,
            maps,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.maps.len()
    }

    pub fn output_dim(&self, agent: usize) -> usize {
        self.maps[agent].nrows()
    }

    pub fn observe(&self, agent: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self.quantity {
            ObservedQuantity::State => &self.maps[agent] * x,
            ObservedQuantity::Control => &self.maps[agent] * u,
        }
    }
}

fn selector(block: std::ops::Range<usize>, dim: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(block.len(), dim);
    for (r, c) in block.enumerate() {
        g[(r, c)] = 1.0;
    }
    g
}

/// `entries[t][i]` is `o^i_t`, or `None` when unavailable.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    model: ObservationModel,
    entries: Vec<Vec<Option<DVector<f64>>>>,
}

impl ObservationSequence {
    pub fn new(model: ObservationModel, entries: Vec<Vec<Option<DVector<f64>>>>) -> Result<Self> {
        for step in &entries {
            if step.len() != model.n_agents() {
                return Err(Error::dims(
                    "observations per step",
                    model.n_agents(),
                    step.len(),
                ));
            }
            for (i, o) in step.iter().enumerate() {
                if let Some(o) = o {
                    if o.len() != model.output_dim(i) {
                        return Err(Error::dims("observation", model.output_dim(i), o.len()));
                    }
                }
            }
        }
        Ok(Self { model, entries })
    }

    /// Noise-free observations of every step of `trajectory`.
    pub fn from_trajectory(model: ObservationModel, trajectory: &TrajectoryBundle) -> Result<Self> {
        let entries = trajectory
            .states
            .iter()
            .zip(&trajectory.controls)
            .map(|(x, u)| {
                (0..model.n_agents())
                    .map(|i| Some(model.observe(i, x, u)))
                    .collect()
            })
            .collect();
        Self::new(model, entries)
    }

    /// Observations of each agent's own part of its hypothesized equilibrium,
    /// i.e. what a level-2 data generator emits over one horizon.
    pub fn from_hypothesized(
        model: ObservationModel,
        per_agent: &[TrajectoryBundle],
    ) -> Result<Self> {
        if per_agent.len() != model.n_agents() {
            return Err(Error::dims(
                "hypothesized trajectories",
                model.n_agents(),
                per_agent.len(),
            ));
        }
        let steps = per_agent[0].len();
        let entries = (0..steps)
            .map(|t| {
                (0..model.n_agents())
                    .map(|i| {
                        Some(model.observe(i, &per_agent[i].states[t], &per_agent[i].controls[t]))
                    })
                    .collect()
            })
            .collect();
        Self::new(model, entries)
    }

    pub fn model(&self) -> &ObservationModel {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, t: usize, agent: usize) -> Option<&DVector<f64>> {
        self.entries.get(t)?.get(agent)?.as_ref()
    }

    pub fn entries(&self) -> &[Vec<Option<DVector<f64>>>] {
        &self.entries
    }

    /// Steps `start .. start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Precondition(format!(
                "window {start}..{} exceeds {} observed steps",
                start + len,
                self.len()
            )));
        }
        Self::new(
            self.model.clone(),
            self.entries[start..start + len].to_vec(),
        )
    }

    /// The same sequence with every entry removed.
    pub fn all_missing(&self) -> Self {
        Self {
            model: self.model.clone(),
            entries: vec![vec![None; self.model.n_agents()]; self.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{counterexample_game, make_lane_change_game, LaneChangeConfig};

    #[test]
    fn position_model_selects_own_block() {
        let g = make_lane_change_game(&LaneChangeConfig::default()).unwrap();
        let model = ObservationModel::own_state_entries(&g, &[0, 1]);
        let x = DVector::from_fn(8, |i, _| i as f64);
        let o = model.observe(1, &x, &DVector::zeros(4));
        assert_eq!(o.as_slice(), &[4.0, 5.0]);
    }

    #[test]
    fn control_model_and_window_bounds() {
        let g = counterexample_game().unwrap();
        let model = ObservationModel::own_controls(&g);
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            model.observe(1, &DVector::zeros(2), &u).as_slice(),
            &[3.0, 4.0]
        );
        let traj = TrajectoryBundle::new(vec![DVector::zeros(2); 3], vec![u; 3]);
        let seq = ObservationSequence::from_trajectory(model, &traj).unwrap();
        assert_eq!(seq.window(1, 2).unwrap().len(), 2);
        assert!(seq.window(2, 2).is_err());
        assert!(seq.all_missing().get(0, 0).is_none());
    }

    #[test]
    fn rejects_wrong_dimension() {
        let g = counterexample_game().unwrap();
        let model = ObservationModel::own_controls(&g);
        let bad = vec![vec![Some(DVector::zeros(3)), None]];
        assert!(ObservationSequence::new(model, bad).is_err());
    }
}
