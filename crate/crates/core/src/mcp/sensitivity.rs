//! Implicit differentiation of MCP solutions with respect to the cost
//! parameters.

use nalgebra::{DMatrix, DVector};

use super::problem::McpProblem;
use super::reduced::{ReducedSystem, Treatment};
use super::solver::{check_strict_complementarity, McpSolution};
use crate::error::{Error, Result};

/// `∂z*/∂θ` for the flattened parameter row of `problem`.
///
/// Active inequalities are held as equalities and inactive multipliers stay
/// at zero, so their rows of the result are zero. Fails with
/// [`Error::Degenerate`] when strict complementarity does not hold.
pub fn sensitivity(
    problem: &McpProblem,
    solution: &McpSolution,
    eps_act: f64,
) -> Result<DMatrix<f64>> {
    let solution = solution.clone().into_converged()?;
    let partition = check_strict_complementarity(&solution, eps_act);
    if !partition.degenerate.is_empty() {
        return Err(Error::Degenerate {
            indices: partition.degenerate,
        });
    }
    let layout = problem.layout();
    let n_w = layout.n_w();
    let mut treatments = vec![Treatment::Drop; layout.n_gamma];
    for &k in &partition.active {
        treatments[k] = Treatment::Keep(0.0);
    }
    let lin = problem.linearize(&solution.z)?;
    let sys = ReducedSystem::build(layout, &lin, &treatments);
    let factored = sys.factor()?;
    let p = problem.param_jacobian(&solution.z)?;
    let mut out = DMatrix::zeros(problem.dim(), p.ncols());
    for c in 0..p.ncols() {
        let mut rhs = DVector::zeros(sys.dim());
        rhs.rows_mut(0, n_w).copy_from(&(-p.column(c)));
        let sol = factored.solve(&rhs);
        let mut col = out.column_mut(c);
        col.rows_mut(0, n_w).copy_from(&sol.rows(0, n_w));
        for (i, &k) in sys.kept.iter().enumerate() {
            col[n_w + k] = sol[n_w + i];
        }
    }
    Ok(out)
}
