//! Newton-type linear systems over `w` (all non-`γ` variables) and a
//! subset of the inequality multipliers.
//!
//! Each inequality `k` is either eliminated (its multiplier step is
//! recovered afterwards), kept as an extra row and column, or dropped with
//! a zero multiplier step. Rows and columns are ordered by time stage
//! before factorization so the matrix is banded.

use nalgebra::{DMatrix, DVector};

use super::problem::{Linearization, McpLayout};
use crate::error::{Error, Result};
use crate::linalg::{bandwidths, BandedLu};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Treatment {
    /// Row `D_a δγ_k + D_b r_kᵀ δw = rhs_k` solved for `δγ_k`; stores
    /// `D_b / D_a`.
    Eliminate(f64),
    /// Row `r_kᵀ δw + c δγ_k = rhs_k` kept in the system; stores `c`.
    Keep(f64),
    /// `δγ_k = 0` and no row.
    Drop,
}

pub(crate) struct ReducedSystem {
    n_w: usize,
    pub kept: Vec<usize>,
    triplets: Vec<(usize, usize, f64)>,
    row_keys: Vec<(usize, u8)>,
    col_keys: Vec<(usize, u8)>,
}

pub(crate) struct FactoredSystem {
    lu: BandedLu,
    row_pos: Vec<usize>,
    col_at: Vec<usize>,
}

impl ReducedSystem {
    pub fn build(layout: &McpLayout, lin: &Linearization, treatments: &[Treatment]) -> Self {
        let n_w = layout.n_w();
        let mut triplets = lin.eq_w.clone();
        let mut kept = Vec::new();
        let mut row_keys = layout.eq_keys.clone();
        let mut col_keys = layout.var_keys.clone();
        for (k, treatment) in treatments.iter().enumerate() {
            match *treatment {
                Treatment::Eliminate(ratio) => {
                    if ratio == 0.0 {
                        continue;
                    }
                    for &(r, a) in &lin.eq_gamma[k] {
                        for &(c, g) in &lin.ineq_w[k] {
                            triplets.push((r, c, -a * ratio * g));
                        }
                    }
                }
                Treatment::Keep(diag) => {
                    let idx = n_w + kept.len();
                    for &(r, a) in &lin.eq_gamma[k] {
                        triplets.push((r, idx, a));
                    }
                    for &(c, g) in &lin.ineq_w[k] {
                        triplets.push((idx, c, g));
                    }
                    if diag != 0.0 {
                        triplets.push((idx, idx, diag));
                    }
                    let key = (layout.gamma_time[k], 4);
                    row_keys.push(key);
                    col_keys.push(key);
                    kept.push(k);
                }
                Treatment::Drop => {}
            }
        }
        Self {
            n_w,
            kept,
            triplets,
            row_keys,
            col_keys,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_w + self.kept.len()
    }

    pub fn factor(&self) -> Result<FactoredSystem> {
        let dim = self.dim();
        let order = |keys: &[(usize, u8)]| {
            let mut idx: Vec<usize> = (0..dim).collect();
            idx.sort_by_key(|&i| keys[i]);
            idx
        };
        let row_at = order(&self.row_keys);
        let col_at = order(&self.col_keys);
        let mut row_pos = vec![0; dim];
        for (p, &r) in row_at.iter().enumerate() {
            row_pos[r] = p;
        }
        let mut col_pos = vec![0; dim];
        for (p, &c) in col_at.iter().enumerate() {
            col_pos[c] = p;
        }
        let mut a = DMatrix::zeros(dim, dim);
        for &(r, c, v) in &self.triplets {
            a[(row_pos[r], col_pos[c])] += v;
        }
        let (kl, ku) = bandwidths(
            self.triplets
                .iter()
                .map(|&(r, c, _)| (row_pos[r], col_pos[c])),
        );
        let lu = BandedLu::factor(a, kl, ku)?;
        Ok(FactoredSystem {
            lu,
            row_pos,
            col_at,
        })
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let mut a = DMatrix::zeros(dim, dim);
        for &(r, c, v) in &self.triplets {
            a[(r, c)] += v;
        }
        a
    }

    /// Minimizer of `‖A d − rhs‖² + ρ‖d‖²`.
    pub fn regularized_least_squares(&self, rhs: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
        let a = self.dense();
        let at = a.transpose();
        let mut normal = &at * &a;
        for i in 0..normal.nrows() {
            normal[(i, i)] += rho;
        }
        let chol = normal.cholesky().ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?;
        Ok(chol.solve(&(at * rhs)))
    }
}

impl FactoredSystem {
    /// Solves with right-hand side in original row order; the solution is
    /// in original column order.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let dim = rhs.len();
        let mut b = vec![0.0; dim];
        for r in 0..dim {
            b[self.row_pos[r]] = rhs[r];
        }
        self.lu.solve_in_place(&mut b);
        let mut x = DVector::zeros(dim);
        for (p, &c) in self.col_at.iter().enumerate() {
            x[c] = b[p];
        }
        x
    }
}
