//! Stage constraints `h(x_t, u_t) = 0` and `g(x_t, u_t) ≥ 0` on the joint
//! state and joint control.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait StageConstraint: Debug + Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(∂c/∂x, ∂c/∂u)` over the joint state and joint control.
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    /// Second derivatives of `wᵀ c(x, u)` as `(xx, xu, uu)`, or `None` when
    /// the constraint is affine.
    fn hessian_contract(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        None
    }

    /// State-only constraints are not imposed at the first stage, where the
    /// state is pinned to the initial condition.
    fn state_only(&self) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxTarget {
    State,
    Control,
}

/// Elementwise bounds `lower ≤ v ≤ upper`; infinite bounds are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxConstraint {
    target: BoxTarget,
    rows: Vec<(usize, f64, f64)>,
    state_dim: usize,
    control_dim: usize,
}

impl BoxConstraint {
    pub fn new(
        target: BoxTarget,
        indices: &[usize],
        lower: &[f64],
        upper: &[f64],
        state_dim: usize,
        control_dim: usize,
    ) -> Result<Self> {
        if lower.len() != indices.len() || upper.len() != indices.len() {
            return Err(Error::dims(
                "box bounds",
                indices.len(),
                lower.len().max(upper.len()),
            ));
        }
        let limit = match target {
            BoxTarget::State => state_dim,
            BoxTarget::Control => control_dim,
        };
        let mut rows = Vec::new();
        for ((&i, &lo), &hi) in indices.iter().zip(lower).zip(upper) {
            if i >= limit {
                return Err(Error::dims("box bound index", limit, i + 1));
            }
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return Err(Error::InvalidConfig(format!(
                    "box bound lower {lo} exceeds upper {hi}"
                )));
            }
            if lo.is_finite() {
                rows.push((i, 1.0, lo));
            }
            if hi.is_finite() {
                rows.push((i, -1.0, hi));
            }
        }
        Ok(Self {
            target,
            rows,
            state_dim,
            control_dim,
        })
    }
}

impl StageConstraint for BoxConstraint {
    fn dim(&self) -> usize {
        self.rows.len()
    }

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let v = match self.target {
            BoxTarget::State => x,
            BoxTarget::Control => u,
        };
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|&(i, sign, bound)| sign * (v[i] - bound)),
        )
    }

    fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut jx = DMatrix::zeros(self.rows.len(), self.state_dim);
        let mut ju = DMatrix::zeros(self.rows.len(), self.control_dim);
        let target = match self.target {
            BoxTarget::State => &mut jx,
            BoxTarget::Control => &mut ju,
        };
        for (r, &(i, sign, _)) in self.rows.iter().enumerate() {
            target[(r, i)] = sign;
        }
        (jx, ju)
    }

    fn state_only(&self) -> bool {
        self.target == BoxTarget::State
    }
}

/// `‖p_a − p_b‖² − δ² ≥ 0` between two planar positions in the joint state.
#[derive(Clone, Debug, PartialEq)]
pub struct MinDistance {
    pub a: [usize; 2],
    pub b: [usize; 2],
    pub delta: f64,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl StageConstraint for MinDistance {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let d2: f64 = (0..2).map(|k| (x[self.a[k]] - x[self.b[k]]).powi(2)).sum();
        DVector::from_element(1, d2 - self.delta * self.delta)
    }

    fn jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut jx = DMatrix::zeros(1, self.state_dim);
        for k in 0..2 {
            let d = x[self.a[k]] - x[self.b[k]];
            jx[(0, self.a[k])] += 2.0 * d;
            jx[(0, self.b[k])] -= 2.0 * d;
        }
        (jx, DMatrix::zeros(1, self.control_dim))
    }

    fn hessian_contract(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let mut hxx = DMatrix::zeros(self.state_dim, self.state_dim);
        let s = 2.0 * w[0];
        for k in 0..2 {
            let (i, j) = (self.a[k], self.b[k]);
            hxx[(i, i)] += s;
            hxx[(j, j)] += s;
            hxx[(i, j)] -= s;
            hxx[(j, i)] -= s;
        }
        Some((
            hxx,
            DMatrix::zeros(self.state_dim, self.control_dim),
            DMatrix::zeros(self.control_dim, self.control_dim),
        ))
    }

    fn state_only(&self) -> bool {
        true
    }
}

/// Stage constraints of a game. Agent `j`'s lists make up its private
/// `h^j` and `g^j`. Shared inequalities bind every agent and carry a single
/// multiplier that enters all agents' Lagrangians.
#[derive(Clone, Debug, Default)]
pub struct ConstraintSet {
    pub equality: Vec<Vec<Arc<dyn StageConstraint>>>,
    pub inequality: Vec<Vec<Arc<dyn StageConstraint>>>,
    pub shared_inequality: Vec<Arc<dyn StageConstraint>>,
}

impl ConstraintSet {
    pub fn unconstrained(n_agents: usize) -> Self {
        Self {
            equality: vec![Vec::new(); n_agents],
            inequality: vec![Vec::new(); n_agents],
            shared_inequality: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.shared_inequality.is_empty()
            && self
                .equality
                .iter()
                .chain(&self.inequality)
                .all(|v| v.is_empty())
    }
}
