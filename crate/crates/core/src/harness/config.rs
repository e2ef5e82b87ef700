//! The run configuration document (TOML, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::engine::{InitRule, Preset, SimulationConfig};
use crate::msdtheory::{ExpectationMode, DEFAULT_ENUMERATION_BUDGET, DEFAULT_MC_SAMPLES};
use crate::netgraph::TopologySpec;
use crate::participation::{ActivationRule, ActivationSpec, StepMode};
use crate::problems::GenerationSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfiguration {
    /// Master seed for activation and sampling streams.
    pub seed: u64,
    pub topology: TopologySpec,
    pub activation: ActivationSpec,
    pub problem: ProblemSource,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ProblemSource {
    Synthetic(GenerationSpec),
    /// Columnar text file (`agent,sample,u0,..,d`).
    Dataset(DatasetSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// Relative paths are resolved against the configuration file.
    pub path: PathBuf,
    pub ridge: f64,
}

fn default_record_every() -> usize {
    1
}

fn default_steady_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub mu: f64,
    pub local_steps: usize,
    pub blocks: usize,
    pub repetitions: usize,
    #[serde(default)]
    pub mode: StepMode,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub deterministic_gradient: bool,
    #[serde(default)]
    pub init: InitRule,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Fraction of the final records averaged into the steady-state MSD.
    #[serde(default = "default_steady_fraction")]
    pub steady_fraction: f64,
}

impl SimulationSection {
    pub fn engine_config(&self, seed: u64) -> SimulationConfig {
        SimulationConfig {
            mu: self.mu,
            local_steps: self.local_steps,
            blocks: self.blocks,
            repetitions: self.repetitions,
            seed,
            mode: self.mode,
            preset: self.preset,
            deterministic_gradient: self.deterministic_gradient,
            init: self.init.clone(),
            record_every: self.record_every,
            record_agents: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryModeSetting {
    /// Exact when the pattern support fits the budget.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

impl std::str::FromStr for TheoryModeSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "exact" => Ok(Self::Exact),
            "monte-carlo" => Ok(Self::MonteCarlo),
            other => Err(format!(
                "unknown theory mode `{other}` (expected auto, exact or monte-carlo)"
            )),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_budget() -> usize {
    DEFAULT_ENUMERATION_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub mode: TheoryModeSetting,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: TheoryModeSetting::Auto,
            samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            budget: DEFAULT_ENUMERATION_BUDGET,
        }
    }
}

impl TheorySection {
    pub fn expectation_mode(&self, rule: &ActivationRule) -> ExpectationMode {
        let monte_carlo = ExpectationMode::MonteCarlo {
            samples: self.samples,
            seed: self.seed,
        };
        match self.mode {
            TheoryModeSetting::Exact => ExpectationMode::Exact {
                budget: self.budget,
            },
            TheoryModeSetting::MonteCarlo => monte_carlo,
            TheoryModeSetting::Auto if rule.support_size() <= self.budget as f64 => {
                ExpectationMode::Exact {
                    budget: self.budget,
                }
            }
            TheoryModeSetting::Auto => monte_carlo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Mu,
    LocalSteps,
    /// Uniform activation probability.
    Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    /// Keep per-agent deviations in the trajectory file.
    #[serde(default)]
    pub per_agent: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            per_agent: false,
        }
    }
}

/// Command-line overrides applied on top of a loaded document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub theory_mode: Option<TheoryModeSetting>,
    pub samples: Option<usize>,
}

impl RunConfiguration {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a document and resolves relative dataset paths against it.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let ProblemSource::Dataset(ds) = &mut cfg.problem {
            if ds.path.is_relative() {
                if let Some(dir) = path.parent() {
                    ds.path = dir.join(&ds.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.output.directory = out.clone();
        }
        if let Some(mode) = overrides.theory_mode {
            self.theory.mode = mode;
        }
        if let Some(samples) = overrides.samples {
            self.theory.samples = samples;
        }
    }

    pub fn agent_count(&self) -> usize {
        self.topology.agent_count()
    }

    /// Cross-section consistency checks that serde cannot express.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let k = self.agent_count();
        if let ProblemSource::Synthetic(spec) = &self.problem {
            if spec.agents != k {
                return Err(HarnessError::Config(format!(
                    "problem has {} agents but the topology has {k}",
                    spec.agents
                )));
            }
        }
        if let ActivationSpec::Explicit { q } = &self.activation {
            if q.len() != k {
                return Err(HarnessError::Config(format!(
                    "{} activation probabilities for {k} agents",
                    q.len()
                )));
            }
        }
        let s = &self.simulation;
        if !(s.steady_fraction > 0.0 && s.steady_fraction <= 1.0) {
            return Err(HarnessError::Config(
                "simulation.steady_fraction must lie in (0, 1]".into(),
            ));
        }
        self.simulation.engine_config(self.seed).validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(HarnessError::Config("sweep.values is empty".into()));
            }
            for &v in &sweep.values {
                let ok = match sweep.axis {
                    SweepAxis::Mu => v > 0.0 && v.is_finite(),
                    SweepAxis::LocalSteps => v >= 1.0 && v.fract() == 0.0,
                    SweepAxis::Activation => v > 0.0 && v <= 1.0,
                };
                if !ok {
                    return Err(HarnessError::Config(format!(
                        "sweep value {v} is invalid for axis {:?}",
                        sweep.axis
                    )));
                }
            }
        }
        if self.theory.samples < 2 {
            return Err(HarnessError::Config(
                "theory.samples must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// The desk-scale experiment: eight agents, two-dimensional models.
pub fn desk_profile() -> RunConfiguration {
    RunConfiguration {
        seed: 1,
        topology: TopologySpec::RandomGeometric {
            agents: 8,
            radius: 0.7,
            seed: 11,
        },
        activation: ActivationSpec::UniformRandom {
            low: 0.5,
            high: 1.0,
            seed: 7,
        },
        problem: ProblemSource::Synthetic(GenerationSpec {
            agents: 8,
            dim: 2,
            samples: 100,
            ridge: 0.1,
            input_covariance: Some(vec![vec![0.25, 0.0], vec![0.0, 0.25]]),
            mean_range: [-0.5, 0.5],
            noise_variance_range: [0.1, 1.0],
            w_star: vec![1.0, -1.0],
            seed: 5,
        }),
        simulation: SimulationSection {
            mu: 0.01,
            local_steps: 5,
            blocks: 20_000,
            repetitions: 5,
            mode: StepMode::Plain,
            preset: Preset::General,
            deterministic_gradient: false,
            init: InitRule::Zero,
            record_every: 10,
            steady_fraction: 0.2,
        },
        theory: TheorySection::default(),
        sweep: None,
        output: OutputSection::default(),
    }
}

/// Twenty agents; theory expectations by Monte Carlo.
pub fn k20_profile() -> RunConfiguration {
    let mut cfg = desk_profile();
    cfg.topology = TopologySpec::RandomGeometric {
        agents: 20,
        radius: 0.4,
        seed: 11,
    };
    if let ProblemSource::Synthetic(spec) = &mut cfg.problem {
        spec.agents = 20;
    }
    cfg.theory.mode = TheoryModeSetting::MonteCarlo;
    cfg.theory.samples = 2_000;
    cfg
}
