//! Parameterized stage costs `ℓ^i(x_t, u^i_t; θ)`.
//!
//! Costs see the joint state and only the owning agent's control. All
//! derivatives are with respect to that pair and to the parameter `θ`.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::project_psd;

pub trait StageCost: Debug + Send + Sync {
    fn param_dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &[f64]) -> f64;

    /// `(∇ₓℓ, ∇ᵤℓ)`.
    fn gradient(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &[f64],
    ) -> (DVector<f64>, DVector<f64>);

    /// `(∇ₓₓℓ, ∇ₓᵤℓ, ∇ᵤᵤℓ)`.
    fn hessian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

    /// Derivative of the gradient with respect to `θ`: `(∂∇ₓℓ/∂θ, ∂∇ᵤℓ/∂θ)`.
    fn gradient_param_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>);

    /// Maps `θ` back onto the admissible set after an unconstrained update.
    fn project_params(&self, _theta: &mut [f64]) {}

    /// Downcast hook for closed-form LQ machinery.
    fn as_quadratic(&self) -> Option<&QuadraticCost> {
        None
    }
}

/// Packs a symmetric `n x n` matrix into `n(n+1)/2` entries: the diagonal
/// first, then the strict upper triangle row by row. For `n = 2` this is
/// `[q11, q22, q12]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricParameterization {
    n: usize,
}

impl SymmetricParameterization {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn matrix_dim(&self) -> usize {
        self.n
    }

    pub fn param_dim(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    fn entries(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = (0..self.n).map(|i| (i, i)).collect();
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push((i, j));
            }
        }
        out
    }

    pub fn matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.n, self.n);
        for (k, (i, j)) in self.entries().into_iter().enumerate() {
            q[(i, j)] = theta[k];
            q[(j, i)] = theta[k];
        }
        q
    }

    /// `∂Q/∂θ_k`, constant because the map is linear.
    pub fn basis(&self, k: usize) -> DMatrix<f64> {
        let (i, j) = self.entries()[k];
        let mut e = DMatrix::zeros(self.n, self.n);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    }

    pub fn params(&self, q: &DMatrix<f64>) -> Vec<f64> {
        self.entries()
            .into_iter()
            .map(|(i, j)| 0.5 * (q[(i, j)] + q[(j, i)]))
            .collect()
    }
}

/// `½ xᵀQ(θ)x + ½ uᵀRu`.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub q: SymmetricParameterization,
    pub r: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn new(state_dim: usize, r: DMatrix<f64>) -> Result<Self> {
        if !r.is_square() {
            return Err(Error::dims(
                "control cost R (columns)",
                r.nrows(),
                r.ncols(),
            ));
        }
        if (&r - r.transpose()).amax() > 1e-12 * (1.0 + r.amax()) {
            return Err(Error::NotSymmetric("control cost R"));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("control cost R".into()));
        }
        Ok(Self {
            q: SymmetricParameterization::new(state_dim),
            r,
        })
    }
}

impl StageCost for QuadraticCost {
    fn param_dim(&self) -> usize {
        self.q.param_dim()
    }

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &[f64]) -> f64 {
        let q = self.q.matrix(theta);
        0.5 * x.dot(&(q * x)) + 0.5 * u.dot(&(&self.r * u))
    }

    fn gradient(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &[f64],
    ) -> (DVector<f64>, DVector<f64>) {
        (self.q.matrix(theta) * x, &self.r * u)
    }

    fn hessian(
        &self,
        _x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.q.matrix_dim();
        (
            self.q.matrix(theta),
            DMatrix::zeros(n, u.len()),
            self.r.clone(),
        )
    }

    fn gradient_param_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = self.param_dim();
        let mut gx = DMatrix::zeros(x.len(), k);
        for c in 0..k {
            gx.set_column(c, &(self.q.basis(c) * x));
        }
        (gx, DMatrix::zeros(u.len(), k))
    }

    fn project_params(&self, theta: &mut [f64]) {
        let q = project_psd(&self.q.matrix(theta)).expect("parameterized matrix is symmetric");
        theta.copy_from_slice(&self.q.params(&q));
    }

    fn as_quadratic(&self) -> Option<&QuadraticCost> {
        Some(self)
    }
}

/// `w₁(p_lat − θ)² + w₂‖v − v_d‖² + w₃‖u‖²` for one vehicle, where `θ` is
/// the desired lateral offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneTrackingCost {
    /// Index of the vehicle's lateral position in the joint state.
    pub lat_index: usize,
    /// Indices of the vehicle's `[v_lat, v_lon]` in the joint state.
    pub vel_indices: [usize; 2],
    pub weights: [f64; 3],
    pub desired_velocity: [f64; 2],
}

impl StageCost for LaneTrackingCost {
    fn param_dim(&self) -> usize {
        1
    }

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &[f64]) -> f64 {
        let [w1, w2, w3] = self.weights;
        let dp = x[self.lat_index] - theta[0];
        let dv: f64 = (0..2)
            .map(|k| (x[self.vel_indices[k]] - self.desired_velocity[k]).powi(2))
            .sum();
        w1 * dp * dp + w2 * dv + w3 * u.norm_squared()
    }

    fn gradient(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &[f64],
    ) -> (DVector<f64>, DVector<f64>) {
        let [w1, w2, w3] = self.weights;
        let mut gx = DVector::zeros(x.len());
        gx[self.lat_index] = 2.0 * w1 * (x[self.lat_index] - theta[0]);
        for k in 0..2 {
            let i = self.vel_indices[k];
            gx[i] = 2.0 * w2 * (x[i] - self.desired_velocity[k]);
        }
        (gx, u * (2.0 * w3))
    }

    fn hessian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let [w1, w2, w3] = self.weights;
        let mut hxx = DMatrix::zeros(x.len(), x.len());
        hxx[(self.lat_index, self.lat_index)] = 2.0 * w1;
        for &i in &self.vel_indices {
            hxx[(i, i)] = 2.0 * w2;
        }
        (
            hxx,
            DMatrix::zeros(x.len(), u.len()),
            DMatrix::identity(u.len(), u.len()) * (2.0 * w3),
        )
    }

    fn gradient_param_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut gx = DMatrix::zeros(x.len(), 1);
        gx[(self.lat_index, 0)] = -2.0 * self.weights[0];
        (gx, DMatrix::zeros(u.len(), 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lane_cost() -> LaneTrackingCost {
        LaneTrackingCost {
            lat_index: 0,
            vel_indices: [2, 3],
            weights: [1.0, 0.5, 0.1],
            desired_velocity: [0.0, 2.0],
        }
    }

    #[test]
    fn symmetric_parameterization_round_trip() {
        let p = SymmetricParameterization::new(3);
        let theta = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let q = p.matrix(&theta);
        assert_eq!(q[(0, 1)], 4.0);
        assert_eq!(q[(1, 2)], 6.0);
        assert_eq!(q, q.transpose());
        assert_eq!(p.params(&q), theta.to_vec());
        let two = SymmetricParameterization::new(2).matrix(&[1.0, 1.0, -1.0]);
        assert_eq!(two, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn lane_cost_vanishes_at_targets() {
        let x = DVector::from_vec(vec![1.0, 7.0, 0.0, 2.0]);
        assert_eq!(lane_cost().value(&x, &DVector::zeros(2), &[1.0]), 0.0);
    }

    #[test]
    fn lane_cost_gradient_matches_differences() {
        let c = lane_cost();
        let x = DVector::from_vec(vec![2.3, 4.0, -0.4, 1.1]);
        let u = DVector::from_vec(vec![0.7, -1.2]);
        let theta = [1.5];
        let (gx, gu) = c.gradient(&x, &u, &theta);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (c.value(&xp, &u, &theta) - c.value(&xm, &u, &theta)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7);
        }
        for i in 0..2 {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let fd = (c.value(&x, &up, &theta) - c.value(&x, &um, &theta)) / (2.0 * h);
            assert!((fd - gu[i]).abs() < 1e-7);
        }
        let (jx, _) = c.gradient_param_jacobian(&x, &u, &theta);
        let (gxp, _) = c.gradient(&x, &u, &[theta[0] + h]);
        let (gxm, _) = c.gradient(&x, &u, &[theta[0] - h]);
        assert!(((gxp - gxm) / (2.0 * h) - jx.column(0)).amax() < 1e-7);
    }

    #[test]
    fn quadratic_cost_rejects_indefinite_r() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(QuadraticCost::new(2, r).is_err());
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            QuadraticCost::new(2, r),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn quadratic_projection_clamps_negative_curvature() {
        let c = QuadraticCost::new(2, DMatrix::identity(2, 2)).unwrap();
        let mut theta = [0.0, 0.0, 1.0];
        c.project_params(&mut theta);
        for v in theta {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}
