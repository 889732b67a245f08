use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] level2_core::Error),

    #[error("simulation aborted at t = {} in agent {}'s solve: {}", .0.t, .0.agent + 1, .0.message)]
    SimulationAborted(level2_core::sim::SimFailure),

    #[error("results differ from the published values: {0}")]
    PaperMismatch(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for invalid input or unusable files, 2 for numerical failures, 3
    /// for a mismatch with published values.
    pub fn exit_code(&self) -> i32 {
        use level2_core::Error as E;
        match self {
            CliError::Validation(_) | CliError::Io { .. } => 1,
            CliError::SimulationAborted(_) => 2,
            CliError::PaperMismatch(_) => 3,
            CliError::Core(e) => match e {
                E::SolverFailed { .. }
                | E::Singular { .. }
                | E::AgentSolve { .. }
                | E::Degenerate { .. } => 2,
                E::DimensionMismatch { .. }
                | E::NotSymmetric(_)
                | E::NotPositiveDefinite(_)
                | E::InvalidConfig(_)
                | E::Precondition(_)
                | E::UnsupportedGame(_) => 1,
            },
        }
    }
}
