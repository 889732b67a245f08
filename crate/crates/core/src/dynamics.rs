//! Discrete-time dynamics of the joint state.
//!
//! The joint state is split into blocks. Each block evolves by its own
//! transition map and is controlled by a set of agents. Shared-linear
//! dynamics form a single block that every agent controls; per-agent
//! dynamics give each agent exclusive control of its own block.

use std::fmt::Debug;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Transition map `x' = f(x, u)` of one agent's private state.
pub trait AgentDynamics: Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `(∂f/∂x, ∂f/∂u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    /// Second derivatives of `wᵀ f(x, u)` as `(xx, xu, uu)`. `None` for
    /// maps that are affine.
    fn hessian_contract(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _w: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// Point mass in the plane with state `[p_lat, p_lon, v_lat, v_lon]` and
/// force input `[F_lat, F_lon]`, integrated by explicit Euler.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarDoubleIntegrator {
    pub dt: f64,
    pub mass: f64,
}

impl PlanarDoubleIntegrator {
    pub fn new(dt: f64, mass: f64) -> Result<Self> {
        if !(dt > 0.0) || !(mass > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "double integrator needs dt > 0 and mass > 0 (got dt={dt}, mass={mass})"
            )));
        }
        Ok(Self { dt, mass })
    }

    fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = self.dt;
        a[(1, 3)] = self.dt;
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = self.dt / self.mass;
        b[(3, 1)] = self.dt / self.mass;
        (a, b)
    }
}

impl AgentDynamics for PlanarDoubleIntegrator {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (a, b) = self.matrices();
        a * x + b * u
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        self.matrices()
    }
}

#[derive(Clone, Debug)]
pub enum DynamicsModel {
    /// `x_{t+1} = A x_t + Σ_j B^j u^j_t` on one joint state.
    SharedLinear {
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
    },
    /// `x^i_{t+1} = f^i(x^i_t, u^i_t)`; the joint state concatenates blocks.
    PerAgent(Vec<Arc<dyn AgentDynamics>>),
}

/// A contiguous slice of the joint state with its own transition map.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBlock {
    pub range: Range<usize>,
    pub controllers: Vec<usize>,
}

/// Jacobians of one block's transition with respect to the joint state and
/// joint control.
pub struct BlockJacobians {
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
}

impl DynamicsModel {
    pub fn shared_linear(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims(
                "dynamics matrix A (columns)",
                a.nrows(),
                a.ncols(),
            ));
        }
        if b.is_empty() {
            return Err(Error::Precondition(
                "at least one input matrix required".into(),
            ));
        }
        for bi in &b {
            if bi.nrows() != a.nrows() {
                return Err(Error::dims("input matrix rows", a.nrows(), bi.nrows()));
            }
        }
        Ok(Self::SharedLinear { a, b })
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Self::SharedLinear { b, .. } => b.len(),
            Self::PerAgent(d) => d.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::SharedLinear { a, .. } => a.nrows(),
            Self::PerAgent(d) => d.iter().map(|f| f.state_dim()).sum(),
        }
    }

    pub fn control_dims(&self) -> Vec<usize> {
        match self {
            Self::SharedLinear { b, .. } => b.iter().map(|bi| bi.ncols()).collect(),
            Self::PerAgent(d) => d.iter().map(|f| f.control_dim()).collect(),
        }
    }

    pub fn blocks(&self) -> Vec<StateBlock> {
        match self {
            Self::SharedLinear { a, b } => vec![StateBlock {
                range: 0..a.nrows(),
                controllers: (0..b.len()).collect(),
            }],
            Self::PerAgent(d) => {
                let mut offset = 0;
                d.iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let range = offset..offset + f.state_dim();
                        offset = range.end;
                        StateBlock {
                            range,
                            controllers: vec![i],
                        }
                    })
                    .collect()
            }
        }
    }

    fn control_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.control_dims()
            .into_iter()
            .map(|m| {
                let o = acc;
                acc += m;
                o
            })
            .collect()
    }

    /// Next value of block `block`.
    pub fn step_block(&self, block: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::SharedLinear { a, b } => {
                let mut next = a * x;
                let mut offset = 0;
                for bi in b {
                    next += bi * u.rows(offset, bi.ncols());
                    offset += bi.ncols();
                }
                next
            }
            Self::PerAgent(d) => {
                let blocks = self.blocks();
                let r = &blocks[block].range;
                let uo = self.control_offsets()[block];
                let f = &d[block];
                let xi = x.rows(r.start, r.len()).into_owned();
                let ui = u.rows(uo, f.control_dim()).into_owned();
                f.step(&xi, &ui)
            }
        }
    }

    /// Jacobians of block `block` with respect to the joint `(x, u)`.
    pub fn block_jacobians(
        &self,
        block: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> BlockJacobians {
        match self {
            Self::SharedLinear { a, b } => {
                let m: usize = b.iter().map(|bi| bi.ncols()).sum();
                let mut du = DMatrix::zeros(a.nrows(), m);
                let mut offset = 0;
                for bi in b {
                    du.columns_mut(offset, bi.ncols()).copy_from(bi);
                    offset += bi.ncols();
                }
                BlockJacobians { dx: a.clone(), du }
            }
            Self::PerAgent(d) => {
                let n = self.state_dim();
                let m: usize = self.control_dims().iter().sum();
                let blocks = self.blocks();
                let r = &blocks[block].range;
                let uo = self.control_offsets()[block];
                let f = &d[block];
                let xi = x.rows(r.start, r.len()).into_owned();
                let ui = u.rows(uo, f.control_dim()).into_owned();
                let (fx, fu) = f.jacobians(&xi, &ui);
                let mut dx = DMatrix::zeros(r.len(), n);
                dx.columns_mut(r.start, r.len()).copy_from(&fx);
                let mut du = DMatrix::zeros(r.len(), m);
                du.columns_mut(uo, f.control_dim()).copy_from(&fu);
                BlockJacobians { dx, du }
            }
        }
    }

    /// Second derivatives of `wᵀ f_block(x, u)` over the joint `(x, u)`.
    pub fn block_hessian_contract(
        &self,
        block: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        match self {
            Self::SharedLinear { .. } => None,
            Self::PerAgent(d) => {
                let blocks = self.blocks();
                let r = &blocks[block].range;
                let uo = self.control_offsets()[block];
                let f = &d[block];
                let xi = x.rows(r.start, r.len()).into_owned();
                let ui = u.rows(uo, f.control_dim()).into_owned();
                let (hxx, hxu, huu) = f.hessian_contract(&xi, &ui, w)?;
                let n = self.state_dim();
                let m: usize = self.control_dims().iter().sum();
                let mut jxx = DMatrix::zeros(n, n);
                jxx.view_mut((r.start, r.start), (r.len(), r.len()))
                    .copy_from(&hxx);
                let mut jxu = DMatrix::zeros(n, m);
                jxu.view_mut((r.start, uo), (r.len(), f.control_dim()))
                    .copy_from(&hxu);
                let mut juu = DMatrix::zeros(m, m);
                juu.view_mut((uo, uo), (f.control_dim(), f.control_dim()))
                    .copy_from(&huu);
                Some((jxx, jxu, juu))
            }
        }
    }

    /// Joint next state.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = DVector::zeros(self.state_dim());
        for (k, block) in self.blocks().iter().enumerate() {
            next.rows_mut(block.range.start, block.range.len())
                .copy_from(&self.step_block(k, x, u));
        }
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_integrator_hand_step() {
        let f = PlanarDoubleIntegrator::new(0.1, 1.0).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0, 0.0, 1.0]);
        let next = f.step(&x, &DVector::zeros(2));
        let expected = DVector::from_vec(vec![1.0, 1.1, 0.0, 1.0]);
        assert!((next - expected).amax() < 1e-15);
    }

    #[test]
    fn per_agent_blocks_partition_state() {
        let f: Arc<dyn AgentDynamics> = Arc::new(PlanarDoubleIntegrator::new(0.1, 1.0).unwrap());
        let model = DynamicsModel::PerAgent(vec![f.clone(), f]);
        let blocks = model.blocks();
        assert_eq!(blocks[0].range, 0..4);
        assert_eq!(blocks[1].range, 4..8);
        assert_eq!(blocks[1].controllers, vec![1]);
        let x = DVector::from_fn(8, |i, _| i as f64);
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let jac = model.block_jacobians(1, &x, &u);
        // Agent 2's block responds only to agent 2's force.
        assert_eq!(jac.du[(2, 0)], 0.0);
        assert!((jac.du[(2, 2)] - 0.1).abs() < 1e-15);
        let predicted = &jac.dx * &x + &jac.du * &u;
        assert!((predicted - model.step_block(1, &x, &u)).amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(PlanarDoubleIntegrator::new(0.0, 1.0).is_err());
        assert!(PlanarDoubleIntegrator::new(0.1, -1.0).is_err());
        assert!(DynamicsModel::shared_linear(DMatrix::zeros(2, 3), vec![]).is_err());
    }
}
