//! Mixed complementarity formulation of constrained trajectory games: the
//! transcription, a semismooth Newton solver and implicit differentiation
//! of its solutions.

mod problem;
mod reduced;
mod sensitivity;
mod solver;
mod warm_start;

pub use problem::{transcribe, ConstraintEntry, Linearization, McpLayout, McpProblem};
pub use sensitivity::sensitivity;
pub use solver::{
    check_strict_complementarity, fischer_burmeister, solve_mcp, ActivePartition, McpSolution,
    SolveStatus, SolverSettings,
};
pub use warm_start::warm_start_shift;
