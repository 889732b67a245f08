use nalgebra::DVector;

use super::problem::McpProblem;

/// Initial guess for `problem` from the solution of the same game solved
/// `shift` steps earlier.
///
/// Without a previous solution (or when `shift` covers the whole horizon)
/// this is the cold start: the zero-control rollout from the current
/// initial state with all multipliers zero. Otherwise the previous primal
/// and time-indexed dual trajectories are shifted forward by `shift`
/// steps, the initial-state multipliers are reused, the state tail is
/// padded with a zero-control rollout, and the
/// remaining controls and multipliers are zero.
pub fn warm_start_shift(
    problem: &McpProblem,
    previous: Option<&DVector<f64>>,
    shift: usize,
) -> DVector<f64> {
    let l = problem.layout();
    let horizon = l.horizon;
    let previous = match previous {
        Some(p) if shift < horizon && p.len() == l.dim() => p,
        _ => return problem.cold_start(),
    };
    let dynamics = problem.game().dynamics();
    let mut z = DVector::zeros(l.dim());
    let kept = horizon - shift;

    let mut x = problem.game().x_init().clone();
    z.rows_mut(l.x(0), l.n).copy_from(&x);
    for t in 1..horizon {
        x = if t < kept {
            previous.rows(l.x(t + shift), l.n).into_owned()
        } else {
            dynamics.step(&x, &DVector::zeros(l.m))
        };
        z.rows_mut(l.x(t), l.n).copy_from(&x);
    }
    for t in 0..kept {
        z.rows_mut(l.u(t), l.m)
            .copy_from(&previous.rows(l.u(t + shift), l.m));
    }
    let lam = l.horizon * (l.n + l.m);
    for t in 0..(horizon - 1).saturating_sub(shift) {
        let src = lam + (t + shift) * l.per_step;
        z.rows_mut(lam + t * l.per_step, l.per_step)
            .copy_from(&previous.rows(src, l.per_step));
    }
    let eta = lam + (horizon - 1) * l.per_step;
    z.rows_mut(eta, l.per_step)
        .copy_from(&previous.rows(eta, l.per_step));

    // μ and γ entries are stored time-major with the same per-step pattern
    // at every step except possibly the first.
    for (entries, start) in [
        (&l.equalities, l.mu_start()),
        (&l.inequalities, l.gamma_start()),
    ] {
        for e in entries.iter() {
            let source = entries
                .iter()
                .find(|s| s.t == e.t + shift && s.agent == e.agent && s.constraint == e.constraint);
            if let Some(s) = source {
                z.rows_mut(start + e.offset, e.dim)
                    .copy_from(&previous.rows(start + s.offset, s.dim));
            }
        }
    }
    z
}
