//! Experiment orchestration shared by the command line and the browser demo.

mod commands;
mod config;
pub mod plotdata;

use std::path::Path;

use thiserror::Error;

use crate::engine::EngineError;
use crate::msdtheory::TheoryError;
use crate::netgraph::GraphError;
use crate::participation::ParticipationError;
use crate::problems::ProblemError;

pub use commands::{
    cmd_reproduce, cmd_simulate, cmd_sweep, cmd_theory, prepare, reproduce, sweep, Experiment,
    Figure, FigureOutcome, SimulationOutcome, SimulationSummary, SweepPoint, TheorySummary,
};
pub use config::{
    desk_profile, k20_profile, DatasetSource, OutputSection, Overrides, ProblemSource,
    RunConfiguration, SimulationSection, SweepAxis, SweepSection, TheoryModeSetting, TheorySection,
};

/// Failure classes, each with its process exit code.
#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } => 2,
            HarnessError::Numerical(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<ProblemError> for HarnessError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::Singular | ProblemError::Stationarity(_) => {
                HarnessError::Numerical(e.to_string())
            }
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<ParticipationError> for HarnessError {
    fn from(e: ParticipationError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<GraphError> for HarnessError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::PerronNotConverged { .. } | GraphError::NonFinite => {
                HarnessError::Numerical(e.to_string())
            }
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<EngineError> for HarnessError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Diverged { .. } => HarnessError::Numerical(e.to_string()),
            EngineError::Problem(p) => p.into(),
            EngineError::Participation(p) => p.into(),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<TheoryError> for HarnessError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::Unstable { .. } | TheoryError::Singular | TheoryError::Residual { .. } => {
                HarnessError::Numerical(e.to_string())
            }
            TheoryError::Problem(p) => p.into(),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}
