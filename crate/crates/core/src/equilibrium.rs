//! A common interface over the closed-form LQ solve and the MCP solver, as
//! consumed by the inverse game and the simulator.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{ParameterizedGame, TrajectoryBundle};
use crate::lq::{assemble_kkt, lq_sensitivity, solve_lq_equilibrium, LqEquilibrium};
use crate::mcp::{
    sensitivity, solve_mcp, warm_start_shift, McpProblem, McpSolution, SolveStatus, SolverSettings,
};
use crate::params::AgentParams;

/// Per-solve diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub status: SolveStatus,
    pub warm_started: bool,
    /// `‖F_eq‖_∞` of the returned point.
    pub equality_residual: f64,
    /// `max |min(γ, F_ineq)|` of the returned point.
    pub complementarity_residual: f64,
    /// Most negative entry of `γ` and `F_ineq`, or 0.
    pub sign_violation: f64,
}

/// One equilibrium of `Γ(row)`.
///
/// `z` starts with the trajectory prefix `[X, U]` (states time-major, then
/// joint controls time-major) in both backends.
#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub z: DVector<f64>,
    pub trajectory: TrajectoryBundle,
    pub stats: SolveStats,
    detail: Detail,
}

#[derive(Clone, Debug)]
enum Detail {
    Lq(LqEquilibrium),
    Mcp(Box<McpSolution>),
}

impl Equilibrium {
    /// The MCP solution, when produced by the MCP backend.
    pub fn mcp_solution(&self) -> Option<&McpSolution> {
        match &self.detail {
            Detail::Mcp(s) => Some(s),
            Detail::Lq(_) => None,
        }
    }
}

/// Previous solution to start from, solved `shift` steps earlier.
#[derive(Clone, Copy, Debug)]
pub struct WarmStart<'a> {
    pub z: &'a DVector<f64>,
    pub shift: usize,
}

pub trait EquilibriumSolver: Send + Sync {
    /// Solves `Γ(row)` from the game's initial state.
    fn solve(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        warm: Option<WarmStart<'_>>,
    ) -> Result<Equilibrium>;

    /// Like [`EquilibriumSolver::solve`], but a solve that stops without
    /// converging returns its final iterate, flagged by `stats.status`.
    fn solve_best_effort(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        warm: Option<WarmStart<'_>>,
    ) -> Result<Equilibrium> {
        self.solve(game, row, warm)
    }

    /// `∂[X, U]/∂θ` over the flattened row, shape `T(n + m) × row dim`.
    fn trajectory_sensitivity(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        eq: &Equilibrium,
    ) -> Result<DMatrix<f64>>;
}

fn trajectory_dim(game: &ParameterizedGame) -> usize {
    game.horizon() * (game.state_dim() + game.control_dim())
}

/// Closed-form solver for unconstrained shared-linear quadratic games.
#[derive(Clone, Copy, Debug, Default)]
pub struct LqSolver;

impl EquilibriumSolver for LqSolver {
    fn solve(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        _warm: Option<WarmStart<'_>>,
    ) -> Result<Equilibrium> {
        let kkt = assemble_kkt(game, row, game.x_init())?;
        let eq = solve_lq_equilibrium(&kkt)?;
        let residual = kkt.residual(&eq.z).amax();
        Ok(Equilibrium {
            z: eq.z.clone(),
            trajectory: eq.trajectory(),
            stats: SolveStats {
                iterations: 0,
                residual,
                status: SolveStatus::Converged,
                warm_started: false,
                equality_residual: residual,
                complementarity_residual: 0.0,
                sign_violation: 0.0,
            },
            detail: Detail::Lq(eq),
        })
    }

    fn trajectory_sensitivity(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        eq: &Equilibrium,
    ) -> Result<DMatrix<f64>> {
        let Detail::Lq(lq) = &eq.detail else {
            return Err(Error::Precondition(
                "equilibrium was not produced by the LQ solver".into(),
            ));
        };
        let kkt = assemble_kkt(game, row, game.x_init())?;
        let s = lq_sensitivity(game, &kkt, lq)?;
        Ok(s.rows(0, trajectory_dim(game)).into_owned())
    }
}

/// Semismooth Newton MCP solver. A failed warm-started solve is retried
/// from the cold start.
#[derive(Clone, Debug, Default)]
pub struct McpEquilibriumSolver {
    pub settings: SolverSettings,
}

impl McpEquilibriumSolver {
    pub fn new(settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self { settings })
    }

    fn finish(
        &self,
        problem: &McpProblem,
        sol: McpSolution,
        warm_started: bool,
    ) -> Result<Equilibrium> {
        Ok(Self::wrap(problem, sol.into_converged()?, warm_started))
    }

    fn wrap(problem: &McpProblem, sol: McpSolution, warm_started: bool) -> Equilibrium {
        Equilibrium {
            z: sol.z.clone(),
            trajectory: problem.layout().trajectory(&sol.z),
            stats: SolveStats {
                iterations: sol.iterations,
                residual: sol.residual_norm,
                status: sol.status,
                warm_started,
                equality_residual: sol.equality_residual(),
                complementarity_residual: sol.complementarity_residual(),
                sign_violation: sol.sign_violation(),
            },
            detail: Detail::Mcp(Box::new(sol)),
        }
    }
}

impl EquilibriumSolver for McpEquilibriumSolver {
    fn solve(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        warm: Option<WarmStart<'_>>,
    ) -> Result<Equilibrium> {
        let problem = McpProblem::new(game, row)?;
        if let Some(w) = warm {
            let z0 = warm_start_shift(&problem, Some(w.z), w.shift);
            match solve_mcp(&problem, &z0, &self.settings)
                .and_then(|s| self.finish(&problem, s, true))
            {
                Ok(eq) => return Ok(eq),
                Err(e) => debug!("warm-started solve failed ({e}); retrying from the cold start"),
            }
        }
        let sol = solve_mcp(&problem, &problem.cold_start(), &self.settings)?;
        self.finish(&problem, sol, false)
    }

    fn solve_best_effort(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        warm: Option<WarmStart<'_>>,
    ) -> Result<Equilibrium> {
        let problem = McpProblem::new(game, row)?;
        let mut best: Option<(McpSolution, bool)> = None;
        if let Some(w) = warm {
            let sol = solve_mcp(
                &problem,
                &warm_start_shift(&problem, Some(w.z), w.shift),
                &self.settings,
            )?;
            if sol.converged() {
                return Ok(Self::wrap(&problem, sol, true));
            }
            best = Some((sol, true));
        }
        let cold = solve_mcp(&problem, &problem.cold_start(), &self.settings)?;
        let (sol, warm_started) = match best {
            Some((w, true)) if !cold.converged() && w.residual_norm < cold.residual_norm => {
                (w, true)
            }
            _ => (cold, false),
        };
        if !sol.converged() {
            debug!(
                "keeping an unconverged iterate with residual {:e}",
                sol.residual_norm
            );
        }
        Ok(Self::wrap(&problem, sol, warm_started))
    }

    fn trajectory_sensitivity(
        &self,
        game: &ParameterizedGame,
        row: &[AgentParams],
        eq: &Equilibrium,
    ) -> Result<DMatrix<f64>> {
        let Detail::Mcp(sol) = &eq.detail else {
            return Err(Error::Precondition(
                "equilibrium was not produced by the MCP solver".into(),
            ));
        };
        let problem = McpProblem::new(game, row)?;
        let s = sensitivity(&problem, sol, self.settings.eps_act)?;
        Ok(s.rows(0, trajectory_dim(game)).into_owned())
    }
}
