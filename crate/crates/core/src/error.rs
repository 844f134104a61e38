use thiserror::Error;

use crate::geometry::Configuration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("globules {i} and {j} have coincident centers")]
    DegenerateContact { i: usize, j: usize },

    #[error("globule index {index} out of range for {len} globules")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("projection did not converge after {iterations} active-set iterations")]
    ProjectionFailure {
        iterations: usize,
        state: Box<Configuration>,
    },

    #[error("proposed displacement {displacement:.3e} exceeds the safety bound {bound:.3e}")]
    StepTooLarge { displacement: f64, bound: f64 },

    #[error("simulation aborted at step {step}: {source}")]
    SimulationAborted {
        step: usize,
        last_good: Box<Configuration>,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("ensemble of {got} trajectories is too small; at least {needed} are required")]
    EnsembleTooSmall { got: usize, needed: usize },

    #[error("chain search exceeded {limit} expansions")]
    ChainSearchOverflow { limit: usize },

    #[error("incompatible time grid: {0}")]
    Grid(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of a numerical routine (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ProjectionFailure { .. }
                | Error::StepTooLarge { .. }
                | Error::SimulationAborted { .. }
                | Error::Numerical(_)
                | Error::ChainSearchOverflow { .. }
        )
    }
}
