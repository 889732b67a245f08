//! Objective parameters and the level-2 parameter set.
//!
//! A [`Level2ParamSet`] holds an `N x N` grid of [`AgentParams`]: row `i` is
//! agent `i`'s view of the game, with its own parameter in slot `(i, i)` and
//! its estimates of the other agents' parameters elsewhere. Rows are
//! flattened row-major when a single parameter vector is needed.

use crate::error::{Error, Result};

/// Parameter vector of one agent's objective.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams(Vec<f64>);

impl AgentParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(
                "agent parameters must be finite".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![value])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<AgentParams> for Vec<f64> {
    fn from(p: AgentParams) -> Self {
        p.0
    }
}

/// The full estimate `{Θ¹, …, Θᴺ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Level2ParamSet {
    rows: Vec<Vec<AgentParams>>,
}

impl Level2ParamSet {
    /// Builds a set from `N` rows of `N` blocks. Slot `(i, j)` must have the
    /// same dimension in every row.
    pub fn new(rows: Vec<Vec<AgentParams>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Precondition("at least one agent required".into()));
        }
        for row in &rows {
            if row.len() != n {
                return Err(Error::dims("level-2 parameter row", n, row.len()));
            }
        }
        for j in 0..n {
            let dim = rows[0][j].dim();
            for row in &rows {
                if row[j].dim() != dim {
                    return Err(Error::dims("level-2 parameter block", dim, row[j].dim()));
                }
            }
        }
        Ok(Self { rows })
    }

    /// Rows given as plain vectors of per-agent values.
    pub fn from_values(rows: &[Vec<Vec<f64>>]) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|row| row.iter().map(|b| AgentParams::new(b.clone())).collect())
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// The level-1 representation: every agent holds the same row.
    pub fn homogeneous(row: Vec<AgentParams>) -> Result<Self> {
        let n = row.len();
        Self::new(vec![row; n])
    }

    pub fn n_agents(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[AgentParams] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<AgentParams>] {
        &self.rows
    }

    pub fn block(&self, i: usize, j: usize) -> &AgentParams {
        &self.rows[i][j]
    }

    /// Dimension of agent `j`'s parameter.
    pub fn block_dim(&self, j: usize) -> usize {
        self.rows[0][j].dim()
    }

    /// Length of one flattened row.
    pub fn row_dim(&self) -> usize {
        (0..self.n_agents()).map(|j| self.block_dim(j)).sum()
    }

    pub fn dim(&self) -> usize {
        self.n_agents() * self.row_dim()
    }

    /// `θ̂^{i,j} = θ̂^{i',j}` for all `i, i', j`.
    pub fn is_homogeneous(&self) -> bool {
        self.rows.iter().all(|row| row == &self.rows[0])
    }

    /// Each agent's own parameter, `{θ̂^{1,1}, …, θ̂^{N,N}}`.
    pub fn diagonal(&self) -> Vec<AgentParams> {
        (0..self.n_agents())
            .map(|i| self.rows[i][i].clone())
            .collect()
    }

    pub fn flat_row(&self, i: usize) -> Vec<f64> {
        flatten_row(&self.rows[i])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| flatten_row(r)).collect()
    }

    /// Inverse of [`Self::to_flat`] using this set's block dimensions.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.dim() {
            return Err(Error::dims(
                "flattened parameter set",
                self.dim(),
                flat.len(),
            ));
        }
        let dims: Vec<usize> = (0..self.n_agents()).map(|j| self.block_dim(j)).collect();
        let row_dim = self.row_dim();
        let rows = flat
            .chunks(row_dim)
            .map(|chunk| unflatten_row(chunk, &dims))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// Index of entry `k` of block `(i, j)` in the flattened vector.
    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        let offset: usize = (0..j).map(|jj| self.block_dim(jj)).sum();
        i * self.row_dim() + offset + k
    }
}

pub fn flatten_row(row: &[AgentParams]) -> Vec<f64> {
    row.iter()
        .flat_map(|b| b.values().iter().copied())
        .collect()
}

pub fn unflatten_row(flat: &[f64], dims: &[usize]) -> Result<Vec<AgentParams>> {
    let total: usize = dims.iter().sum();
    if flat.len() != total {
        return Err(Error::dims("flattened parameter row", total, flat.len()));
    }
    let mut out = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &d in dims {
        out.push(AgentParams::new(flat[offset..offset + d].to_vec())?);
        offset += d;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vals: &[f64]) -> Vec<AgentParams> {
        vals.iter()
            .map(|&v| AgentParams::scalar(v).unwrap())
            .collect()
    }

    #[test]
    fn replicated_row_is_homogeneous() {
        let set = Level2ParamSet::homogeneous(row(&[1.0, 2.0, 3.0])).unwrap();
        assert!(set.is_homogeneous());
    }

    #[test]
    fn perturbed_off_diagonal_breaks_homogeneity() {
        let set = Level2ParamSet::homogeneous(row(&[1.0, 2.0])).unwrap();
        let mut flat = set.to_flat();
        flat[set.flat_index(0, 1, 0)] += 1e-9;
        assert!(!set.with_flat(&flat).unwrap().is_homogeneous());
    }

    #[test]
    fn rejects_ragged_and_non_finite() {
        assert!(AgentParams::new(vec![f64::NAN]).is_err());
        let bad = vec![row(&[1.0, 2.0]), row(&[1.0])];
        assert!(Level2ParamSet::new(bad).is_err());
        let mismatched = vec![
            vec![
                AgentParams::new(vec![1.0, 2.0]).unwrap(),
                AgentParams::scalar(1.0).unwrap(),
            ],
            row(&[1.0, 1.0]),
        ];
        assert!(Level2ParamSet::new(mismatched).is_err());
    }

    #[test]
    fn flat_round_trip_and_indexing() {
        let set = Level2ParamSet::from_values(&[
            vec![vec![1.0, 2.0], vec![3.0]],
            vec![vec![4.0, 5.0], vec![6.0]],
        ])
        .unwrap();
        let flat = set.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(set.with_flat(&flat).unwrap(), set);
        assert_eq!(flat[set.flat_index(1, 0, 1)], 5.0);
        assert_eq!(set.diagonal()[1].values(), &[6.0]);
    }
}
