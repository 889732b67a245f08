use thiserror::Error;

use crate::mcp::SolveStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{0} is not symmetric")]
    NotSymmetric(&'static str),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matrix is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("equilibrium solve failed for agent {agent}: {source}")]
    AgentSolve {
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("MCP solver stopped with status {status:?} (residual {residual:e} after {iterations} iterations)")]
    SolverFailed {
        status: SolveStatus,
        residual: f64,
        iterations: usize,
    },

    #[error("strict complementarity violated at {} inequality indices", indices.len())]
    Degenerate { indices: Vec<usize> },

    #[error("game is not of the required form: {0}")]
    UnsupportedGame(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn for_agent(self, agent: usize) -> Self {
        match self {
            e @ Error::AgentSolve { .. } => e,
            e => Error::AgentSolve {
                agent,
                source: Box::new(e),
            },
        }
    }
}
