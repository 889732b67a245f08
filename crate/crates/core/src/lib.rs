//! Level-2 dynamic games: agents that act on their own objective and on
//! private estimates of everyone else's.
//!
//! The crate provides game descriptions ([`game`], [`scenario`]), a closed
//! form for linear-quadratic games ([`lq`]), a differentiable
//! mixed-complementarity equilibrium solver for constrained games
//! ([`mcp`]), gradient-based inverse games ([`inverse`]) and a
//! receding-horizon simulator ([`sim`]).

// Validation is written as `!(x > 0.0)` so that NaN is rejected, and the
// block assembly indexes several parallel arrays by agent.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod constraints;
pub mod cost;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod game;
pub mod inverse;
pub mod linalg;
pub mod lq;
pub mod mcp;
pub mod observation;
pub mod params;
pub mod scenario;
pub mod sim;

pub use equilibrium::{Equilibrium, EquilibriumSolver, LqSolver, McpEquilibriumSolver};
pub use error::{Error, Result};
pub use game::{ParameterizedGame, TrajectoryBundle};
pub use observation::{ObservationModel, ObservationSequence};
pub use params::{AgentParams, Level2ParamSet};
