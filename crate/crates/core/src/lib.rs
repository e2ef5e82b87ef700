//! Diffusion learning over networks with local updates and partial agent
//! participation.
//!
//! The crate is organised bottom-up:
//!
//! - [`netgraph`]: topologies and static doubly-stochastic combination matrices.
//! - [`participation`]: random agent activation, the time-varying combination
//!   and step-size matrices it induces, and their exact expectations.
//! - [`problems`]: the synthetic ridge-regression family with exact gradient,
//!   Hessian, optimum and gradient-noise oracles.
//! - [`engine`]: the stochastic block recursion (T local steps, then a combine
//!   over active neighbours), special-case presets and empirical MSD.
//! - [`msdtheory`]: the closed-form steady-state MSD built from block-Kronecker
//!   operators averaged over activation patterns.
//! - [`harness`]: configuration documents, experiment orchestration and
//!   plot-ready output, shared by the CLI and the browser demo.

pub mod engine;
pub mod harness;
pub mod msdtheory;
pub mod netgraph;
pub mod participation;
pub mod problems;
pub mod rng;

mod linalg;

pub use engine::{EngineError, Preset, SimulationConfig, TrajectoryRecord};
pub use msdtheory::{ExpectationMode, MsdReport, TheoryError};
pub use netgraph::{CombinationMatrix, GraphError, Topology};
pub use participation::{ActivationModel, ActivationPattern, ActivationRule, StepMode};
pub use problems::{ProblemError, QuadraticProblem};
