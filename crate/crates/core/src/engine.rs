//! The stochastic block recursion.
//!
//! One block: draw an activation pattern, let every active agent take `T`
//! local stochastic-gradient steps, then let every active agent replace its
//! model with the weighted sum of its active neighbours' models. Inactive
//! agents do nothing for the whole block.
//!
//! Randomness is keyed by `(seed, repetition, block)`: the activation stream
//! and the sampling stream of a block are independent of every other block,
//! so any block is replayable and repetitions can run in parallel.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::CombinationMatrix;
use crate::participation::{
    self, active_step_sizes, expected_matrix, expected_step_product, ActivationModel,
    ActivationPattern, ActivationRule, MixingRule, ParticipationError, StepMode,
};
use crate::problems::{ProblemError, QuadraticProblem};
use crate::rng::{self, Purpose};

/// Any model coordinate beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("iterates diverged in repetition {repetition} at block {block}")]
    Diverged { repetition: u64, block: usize },
    #[error("steady-state window {0}")]
    Window(String),
    #[error(transparent)]
    Participation(#[from] ParticipationError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Special cases of the general recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Preset {
    /// Graph mixing, Bernoulli participation, `T` local steps.
    #[default]
    General,
    /// Everyone active, combine by global averaging.
    FedavgFull,
    /// A uniform subset of `subset` agents per block, averaged among themselves.
    FedavgPartial { subset: usize },
    /// Everyone active, `T = 1`.
    StandardDiffusion,
    /// Bernoulli participation, `T = 1`.
    AsyncDiffusion,
    /// Everyone active, graph mixing, `T` local steps.
    DecentralizedFl,
}

/// The engine configuration a preset resolves to.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetPlan {
    pub mixing: MixingRule,
    pub activation: ActivationRule,
    pub local_steps: usize,
}

pub fn apply_preset(
    preset: Preset,
    graph: &CombinationMatrix,
    activation: &ActivationModel,
    local_steps: usize,
) -> Result<PresetPlan, EngineError> {
    let k = graph.agent_count();
    if activation.agent_count() != k {
        return Err(EngineError::Dimension(format!(
            "activation model has {} agents, graph has {k}",
            activation.agent_count()
        )));
    }
    let full = ActivationRule::Bernoulli(ActivationModel::full(k));
    let bernoulli = ActivationRule::Bernoulli(activation.clone());
    let graph_rule = MixingRule::Graph(graph.clone());
    let plan = match preset {
        Preset::General => PresetPlan {
            mixing: graph_rule,
            activation: bernoulli,
            local_steps,
        },
        Preset::FedavgFull => PresetPlan {
            mixing: MixingRule::Graph(CombinationMatrix::averaging(k)),
            activation: full,
            local_steps,
        },
        Preset::FedavgPartial { subset } => PresetPlan {
            mixing: MixingRule::ActiveAverage { agents: k },
            activation: ActivationRule::uniform_subset(k, subset)?,
            local_steps,
        },
        Preset::StandardDiffusion => PresetPlan {
            mixing: graph_rule,
            activation: full,
            local_steps: 1,
        },
        Preset::AsyncDiffusion => PresetPlan {
            mixing: graph_rule,
            activation: bernoulli,
            local_steps: 1,
        },
        Preset::DecentralizedFl => PresetPlan {
            mixing: graph_rule,
            activation: full,
            local_steps,
        },
    };
    Ok(plan)
}

/// Starting models (every agent starts from the same vector).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitRule {
    #[default]
    Zero,
    /// The minimiser of the participation-weighted risk.
    DriftedOptimum,
    /// The minimiser of the plain average risk.
    UnweightedOptimum,
    Explicit {
        w: Vec<f64>,
    },
}

fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub mu: f64,
    pub local_steps: usize,
    pub blocks: usize,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: StepMode,
    #[serde(default)]
    pub preset: Preset,
    /// Use the full local gradient instead of a sampled one.
    #[serde(default)]
    pub deterministic_gradient: bool,
    #[serde(default)]
    pub init: InitRule,
    /// Record every n-th block boundary.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Keep per-agent deviations in the trajectory.
    #[serde(default)]
    pub record_agents: bool,
}

impl SimulationConfig {
    pub fn new(mu: f64, local_steps: usize, blocks: usize, repetitions: usize, seed: u64) -> Self {
        Self {
            mu,
            local_steps,
            blocks,
            repetitions,
            seed,
            mode: StepMode::Plain,
            preset: Preset::General,
            deterministic_gradient: false,
            init: InitRule::Zero,
            record_every: 1,
            record_agents: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(EngineError::Config(format!(
                "mu must be a nonnegative finite number, got {}",
                self.mu
            )));
        }
        if self.local_steps == 0 {
            return Err(EngineError::Config("local_steps must be at least 1".into()));
        }
        if self.blocks == 0 {
            return Err(EngineError::Config("blocks must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(EngineError::Config("repetitions must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(EngineError::Config(
                "record_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Stacked agent models plus the block clock.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    models: Vec<f64>,
    agents: usize,
    dim: usize,
    /// Blocks completed so far.
    pub block: usize,
}

impl NetworkState {
    pub fn uniform(agents: usize, w: &[f64]) -> Self {
        let mut models = Vec::with_capacity(agents * w.len());
        for _ in 0..agents {
            models.extend_from_slice(w);
        }
        Self {
            models,
            agents,
            dim: w.len(),
            block: 0,
        }
    }

    pub fn from_stacked(agents: usize, stacked: Vec<f64>) -> Result<Self, EngineError> {
        if agents == 0 || !stacked.len().is_multiple_of(agents) {
            return Err(EngineError::Dimension(
                "stacked length is not a multiple of the agent count".into(),
            ));
        }
        let dim = stacked.len() / agents;
        Ok(Self {
            models: stacked,
            agents,
            dim,
            block: 0,
        })
    }

    pub fn model(&self, k: usize) -> &[f64] {
        &self.models[k * self.dim..(k + 1) * self.dim]
    }

    pub fn stacked(&self) -> &[f64] {
        &self.models
    }

    pub fn agent_count(&self) -> usize {
        self.agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(1/K) Σ_k w_k`.
    pub fn network_average(&self) -> DVector<f64> {
        let mut avg = DVector::zeros(self.dim);
        for k in 0..self.agents {
            for j in 0..self.dim {
                avg[j] += self.models[k * self.dim + j];
            }
        }
        avg / self.agents as f64
    }

    /// Per-agent `‖w_k − w_ref‖²`.
    pub fn squared_deviations(&self, w_ref: &[f64]) -> Vec<f64> {
        (0..self.agents)
            .map(|k| {
                self.model(k)
                    .iter()
                    .zip(w_ref)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect()
    }
}

/// Runs blocks of the recursion for one resolved configuration.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    problem: &'a QuadraticProblem,
    mixing: &'a MixingRule,
    activation: &'a ActivationRule,
    mu: f64,
    local_steps: usize,
    seed: u64,
    deterministic: bool,
    active_steps: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(
        problem: &'a QuadraticProblem,
        mixing: &'a MixingRule,
        activation: &'a ActivationRule,
        config: &SimulationConfig,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let k = problem.agent_count();
        if mixing.agent_count() != k || activation.agent_count() != k {
            return Err(EngineError::Dimension(format!(
                "problem has {k} agents, mixing rule {}, activation rule {}",
                mixing.agent_count(),
                activation.agent_count()
            )));
        }
        let active_steps = if config.mu == 0.0 {
            vec![0.0; k]
        } else {
            active_step_sizes(config.mu, config.mode, &activation.marginals())?
        };
        Ok(Self {
            problem,
            mixing,
            activation,
            mu: config.mu,
            local_steps: config.local_steps,
            seed: config.seed,
            deterministic: config.deterministic_gradient,
            active_steps,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.mu
    }

    /// One block in place; returns the pattern that was used.
    pub fn advance_block(
        &self,
        state: &mut NetworkState,
        repetition: u64,
    ) -> Result<ActivationPattern, EngineError> {
        let block = state.block as u64;
        let pattern = self.activation.sample(&mut participation::pattern_stream(
            self.seed, repetition, block,
        ));
        self.advance_block_with(state, repetition, &pattern)?;
        Ok(pattern)
    }

    /// One block with a caller-supplied activation pattern.
    pub fn advance_block_with(
        &self,
        state: &mut NetworkState,
        repetition: u64,
        pattern: &ActivationPattern,
    ) -> Result<(), EngineError> {
        let k_count = state.agents;
        let m = state.dim;
        let mut sampler = rng::stream(
            self.seed,
            Purpose::Sampling,
            &[repetition, state.block as u64],
        );
        let mut grad = vec![0.0; m];
        for k in 0..k_count {
            if !pattern.is_active(k) {
                continue;
            }
            let step = self.active_steps[k];
            let n_k = self.problem.samples(k);
            for _ in 0..self.local_steps {
                let w = &mut state.models[k * m..(k + 1) * m];
                if self.deterministic {
                    self.problem.local_gradient_into(k, w, &mut grad);
                } else {
                    let n = sampler.random_range(0..n_k);
                    self.problem.stochastic_gradient_into(k, w, n, &mut grad);
                }
                for (wj, gj) in w.iter_mut().zip(&grad) {
                    *wj -= step * gj;
                }
            }
        }
        let combine = self
            .mixing
            .effective(pattern, self.local_steps, self.local_steps)?;
        let weights = combine.weights();
        let before = state.models.clone();
        for k in (0..k_count).filter(|&k| pattern.is_active(k)) {
            let out = &mut state.models[k * m..(k + 1) * m];
            out.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..k_count {
                let a = weights[(l, k)];
                if a == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(&before[l * m..(l + 1) * m]) {
                    *o += a * x;
                }
            }
        }
        let block = state.block;
        state.block += 1;
        if state
            .models
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
        {
            return Err(EngineError::Diverged { repetition, block });
        }
        Ok(())
    }
}

/// Deviation reference for a run: the drifted optimum, or the unweighted
/// optimum when drift correction is on.
pub fn deviation_reference(
    problem: &QuadraticProblem,
    activation: &ActivationRule,
    mode: StepMode,
) -> Result<DVector<f64>, EngineError> {
    Ok(match mode {
        StepMode::Plain => problem.drifted_optimum(&activation.marginals())?,
        StepMode::DriftCorrected => problem.optimum()?,
    })
}

fn initial_model(
    init: &InitRule,
    problem: &QuadraticProblem,
    activation: &ActivationRule,
) -> Result<Vec<f64>, EngineError> {
    let m = problem.dim();
    Ok(match init {
        InitRule::Zero => vec![0.0; m],
        InitRule::DriftedOptimum => problem
            .drifted_optimum(&activation.marginals())?
            .as_slice()
            .to_vec(),
        InitRule::UnweightedOptimum => problem.optimum()?.as_slice().to_vec(),
        InitRule::Explicit { w } => {
            if w.len() != m {
                return Err(EngineError::Dimension(format!(
                    "initial model has {} entries, expected {m}",
                    w.len()
                )));
            }
            w.clone()
        }
    })
}

/// Learning curves averaged over repetitions, recorded at block boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Block index of each record (0 is the initial state).
    pub blocks: Vec<usize>,
    /// Mean over agents and repetitions of `‖w° − w_k‖²`.
    pub msd: Vec<f64>,
    /// Mean over agents and repetitions of `‖w° − w_k‖⁴`.
    pub fourth: Vec<f64>,
    /// Per-record, per-agent squared deviation (averaged over repetitions).
    pub per_agent: Option<Vec<Vec<f64>>>,
    /// Digest of every activation pattern drawn since the previous record,
    /// folded over repetitions. The RNG position of a block is its
    /// `(seed, repetition, block)` key.
    pub digests: Vec<u64>,
    pub reference: DVector<f64>,
    pub repetitions: usize,
    pub agents: usize,
    pub local_steps: usize,
}

struct RepetitionTrace {
    msd: Vec<f64>,
    fourth: Vec<f64>,
    per_agent: Vec<Vec<f64>>,
    digests: Vec<u64>,
}

/// Runs every repetition of `config` and averages the squared deviations.
pub fn run(
    config: &SimulationConfig,
    problem: &QuadraticProblem,
    mixing: &MixingRule,
    activation: &ActivationRule,
) -> Result<TrajectoryRecord, EngineError> {
    let sim = Simulator::new(problem, mixing, activation, config)?;
    let reference = deviation_reference(problem, activation, config.mode)?;
    let init = initial_model(&config.init, problem, activation)?;
    let reps: Vec<u64> = (0..config.repetitions as u64).collect();
    let one = |rep: u64| run_repetition(&sim, config, &init, reference.as_slice(), rep);
    #[cfg(feature = "parallel")]
    let traces: Vec<Result<RepetitionTrace, EngineError>> = {
        use rayon::prelude::*;
        reps.par_iter().map(|&r| one(r)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let traces: Vec<Result<RepetitionTrace, EngineError>> = reps.iter().map(|&r| one(r)).collect();
    let traces = traces.into_iter().collect::<Result<Vec<_>, _>>()?;

    let records = traces[0].msd.len();
    let k_count = problem.agent_count();
    let reps_f = config.repetitions as f64;
    let mut msd = vec![0.0; records];
    let mut fourth = vec![0.0; records];
    let mut digests = vec![0u64; records];
    let mut per_agent = config
        .record_agents
        .then(|| vec![vec![0.0; k_count]; records]);
    for trace in &traces {
        for i in 0..records {
            msd[i] += trace.msd[i];
            fourth[i] += trace.fourth[i];
            digests[i] = digests[i].rotate_left(7) ^ trace.digests[i];
            if let Some(pa) = per_agent.as_mut() {
                for (acc, v) in pa[i].iter_mut().zip(&trace.per_agent[i]) {
                    *acc += v;
                }
            }
        }
    }
    msd.iter_mut().for_each(|v| *v /= reps_f);
    fourth.iter_mut().for_each(|v| *v /= reps_f);
    if let Some(pa) = per_agent.as_mut() {
        pa.iter_mut().flatten().for_each(|v| *v /= reps_f);
    }
    let blocks = (0..records).map(|i| i * config.record_every).collect();
    Ok(TrajectoryRecord {
        blocks,
        msd,
        fourth,
        per_agent,
        digests,
        reference,
        repetitions: config.repetitions,
        agents: k_count,
        local_steps: config.local_steps,
    })
}

fn run_repetition(
    sim: &Simulator<'_>,
    config: &SimulationConfig,
    init: &[f64],
    reference: &[f64],
    rep: u64,
) -> Result<RepetitionTrace, EngineError> {
    let k_count = sim.problem.agent_count();
    let mut state = NetworkState::uniform(k_count, init);
    let capacity = config.blocks / config.record_every + 1;
    let mut trace = RepetitionTrace {
        msd: Vec::with_capacity(capacity),
        fourth: Vec::with_capacity(capacity),
        per_agent: Vec::new(),
        digests: Vec::with_capacity(capacity),
    };
    let record = |state: &NetworkState, digest: u64, trace: &mut RepetitionTrace| {
        let dev = state.squared_deviations(reference);
        trace.msd.push(dev.iter().sum::<f64>() / k_count as f64);
        trace
            .fourth
            .push(dev.iter().map(|d| d * d).sum::<f64>() / k_count as f64);
        trace.digests.push(digest);
        if config.record_agents {
            trace.per_agent.push(dev);
        }
    };
    record(&state, 0, &mut trace);
    let mut digest = 0u64;
    for _ in 0..config.blocks {
        let pattern = sim.advance_block(&mut state, rep)?;
        digest = digest.rotate_left(5) ^ pattern.digest();
        if state.block.is_multiple_of(config.record_every) {
            record(&state, digest, &mut trace);
            digest = 0;
        }
    }
    Ok(trace)
}

/// Which records form the steady-state window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SteadyWindow {
    /// The final fraction of the records.
    FinalFraction(f64),
    /// Every record at or after this block index.
    FromBlock(usize),
}

impl Default for SteadyWindow {
    fn default() -> Self {
        SteadyWindow::FinalFraction(0.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsdMeasurement {
    pub msd: f64,
    pub fourth_moment: f64,
    pub first_half: f64,
    pub second_half: f64,
    /// Halves of the window differ by less than 10%.
    pub stationary: bool,
    pub records: usize,
    pub window_start_block: usize,
}

/// Average of the learning curve over the steady-state window.
pub fn measure_msd(
    trajectory: &TrajectoryRecord,
    window: SteadyWindow,
) -> Result<MsdMeasurement, EngineError> {
    let n = trajectory.msd.len();
    let start =
        match window {
            SteadyWindow::FinalFraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(EngineError::Window(format!(
                        "fraction {f} must lie in (0, 1]"
                    )));
                }
                n - ((n as f64 * f).round() as usize).clamp(1, n)
            }
            SteadyWindow::FromBlock(b) => trajectory
                .blocks
                .iter()
                .position(|&x| x >= b)
                .ok_or_else(|| {
                    EngineError::Window(format!(
                        "starts at block {b}, past the end of the trajectory"
                    ))
                })?,
        };
    let msd_window = &trajectory.msd[start..];
    if msd_window.len() < 2 {
        return Err(EngineError::Window("needs at least two records".into()));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let half = msd_window.len() / 2;
    let first_half = mean(&msd_window[..half]);
    let second_half = mean(&msd_window[half..]);
    let scale = first_half.abs().max(second_half.abs());
    Ok(MsdMeasurement {
        msd: mean(msd_window),
        fourth_moment: mean(&trajectory.fourth[start..]),
        first_half,
        second_half,
        stationary: scale == 0.0 || (first_half - second_half).abs() < 0.1 * scale,
        records: msd_window.len(),
        window_start_block: trajectory.blocks[start],
    })
}

/// First recorded block at which the excess over `steady` has fallen to
/// `fraction` of its initial value.
pub fn convergence_time(
    trajectory: &TrajectoryRecord,
    steady: f64,
    fraction: f64,
) -> Option<usize> {
    let initial = trajectory.msd.first()? - steady;
    trajectory
        .msd
        .iter()
        .zip(&trajectory.blocks)
        .find(|(v, _)| **v - steady <= fraction * initial)
        .map(|(_, b)| *b)
}

/// Exact one-block map of `E[𝒲]` for `T = 1` with full local gradients:
/// `E𝒲' = (Ā ⊗ I) E𝒲 − (E[A M] ⊗ I) ∇𝒥(E𝒲)`, exact because the gradient is
/// affine and the pattern is independent of the current state.
#[derive(Debug, Clone)]
pub struct MeanRecursion<'a> {
    problem: &'a QuadraticProblem,
    abar: DMatrix<f64>,
    step_product: DMatrix<f64>,
}

impl<'a> MeanRecursion<'a> {
    pub fn new(
        problem: &'a QuadraticProblem,
        graph: &CombinationMatrix,
        model: &ActivationModel,
        mu: f64,
        mode: StepMode,
    ) -> Result<Self, EngineError> {
        Ok(Self {
            problem,
            abar: expected_matrix(graph, model)?.into_inner(),
            step_product: expected_step_product(graph, model, mu, mode)?.product,
        })
    }

    pub fn step(&self, mean: &NetworkState) -> NetworkState {
        let (k_count, m) = (mean.agents, mean.dim);
        let mut grads = vec![0.0; k_count * m];
        for k in 0..k_count {
            self.problem
                .local_gradient_into(k, mean.model(k), &mut grads[k * m..(k + 1) * m]);
        }
        let mut next = vec![0.0; k_count * m];
        for k in 0..k_count {
            for l in 0..k_count {
                let a = self.abar[(l, k)];
                let p = self.step_product[(k, l)];
                for j in 0..m {
                    next[k * m + j] += a * mean.models[l * m + j] - p * grads[l * m + j];
                }
            }
        }
        NetworkState {
            models: next,
            agents: k_count,
            dim: m,
            block: mean.block + 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_metropolis, Topology};
    use crate::problems::{generate_synthetic, GenerationSpec};

    fn problem(agents: usize) -> QuadraticProblem {
        generate_synthetic(&GenerationSpec {
            agents,
            dim: 2,
            samples: 30,
            ridge: 0.1,
            input_covariance: None,
            mean_range: [-1.0, 1.0],
            noise_variance_range: [0.1, 1.0],
            w_star: vec![1.0, -1.0],
            seed: 3,
        })
        .unwrap()
    }

    fn setup(agents: usize, q: f64) -> (QuadraticProblem, MixingRule, ActivationRule) {
        let a = build_metropolis(&Topology::ring(agents).unwrap()).unwrap();
        (
            problem(agents),
            MixingRule::Graph(a),
            ActivationRule::Bernoulli(ActivationModel::uniform(agents, q).unwrap()),
        )
    }

    #[test]
    fn zero_step_keeps_state_fixed() {
        let (p, mix, act) = setup(4, 0.6);
        let mut cfg = SimulationConfig::new(0.0, 3, 20, 1, 1);
        cfg.init = InitRule::Explicit { w: vec![0.5, 0.5] };
        let traj = run(&cfg, &p, &mix, &act).unwrap();
        assert!(traj.msd.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_step_preserves_network_average() {
        let (p, mix, act) = setup(5, 0.5);
        let cfg = SimulationConfig::new(0.0, 2, 1, 1, 9);
        let sim = Simulator::new(&p, &mix, &act, &cfg).unwrap();
        let stacked: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut state = NetworkState::from_stacked(5, stacked).unwrap();
        let before = state.network_average();
        for _ in 0..200 {
            sim.advance_block(&mut state, 0).unwrap();
        }
        assert!((state.network_average() - before).amax() < 1e-12);
    }

    #[test]
    fn inactive_agents_are_frozen_bitwise() {
        let (p, mix, act) = setup(6, 0.4);
        let cfg = SimulationConfig::new(0.05, 3, 1, 1, 4);
        let sim = Simulator::new(&p, &mix, &act, &cfg).unwrap();
        let mut state = NetworkState::uniform(6, &[0.3, -0.1]);
        for _ in 0..300 {
            let before = state.clone();
            let pattern = sim.advance_block(&mut state, 2).unwrap();
            for k in (0..6).filter(|&k| !pattern.is_active(k)) {
                assert_eq!(before.model(k), state.model(k));
            }
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let (p, mix, act) = setup(4, 0.7);
        let cfg = SimulationConfig::new(0.02, 2, 50, 3, 21);
        let a = run(&cfg, &p, &mix, &act).unwrap();
        let b = run(&cfg, &p, &mix, &act).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 22;
        assert_ne!(run(&other, &p, &mix, &act).unwrap().msd, a.msd);
    }

    #[test]
    fn divergence_is_reported() {
        let (p, mix, act) = setup(3, 1.0);
        let cfg = SimulationConfig::new(5.0, 1, 500, 1, 1);
        assert!(matches!(
            run(&cfg, &p, &mix, &act),
            Err(EngineError::Diverged { repetition: 0, .. })
        ));
    }

    #[test]
    fn config_invariants() {
        let (p, mix, act) = setup(3, 1.0);
        for cfg in [
            SimulationConfig::new(0.01, 0, 10, 1, 1),
            SimulationConfig::new(0.01, 1, 0, 1, 1),
            SimulationConfig::new(0.01, 1, 10, 0, 1),
            SimulationConfig::new(-0.01, 1, 10, 1, 1),
        ] {
            assert!(matches!(
                run(&cfg, &p, &mix, &act),
                Err(EngineError::Config(_))
            ));
        }
    }

    #[test]
    fn measure_constant_trajectories() {
        let mk = |v: f64| TrajectoryRecord {
            blocks: (0..10).collect(),
            msd: vec![v; 10],
            fourth: vec![v * v; 10],
            per_agent: None,
            digests: vec![0; 10],
            reference: DVector::zeros(2),
            repetitions: 1,
            agents: 1,
            local_steps: 1,
        };
        let m = measure_msd(&mk(0.0), SteadyWindow::default()).unwrap();
        assert_eq!(m.msd, 0.0);
        assert!(m.stationary);
        let m = measure_msd(&mk(1.0), SteadyWindow::FromBlock(5)).unwrap();
        assert_eq!(m.msd, 1.0);
        assert_eq!(m.records, 5);
        assert!(measure_msd(&mk(1.0), SteadyWindow::FromBlock(50)).is_err());
        assert!(measure_msd(&mk(1.0), SteadyWindow::FinalFraction(0.0)).is_err());
    }

    #[test]
    fn unit_offset_measures_one() {
        let (p, mix, act) = setup(3, 1.0);
        let reference = deviation_reference(&p, &act, StepMode::Plain).unwrap();
        let offset: Vec<f64> = vec![reference[0] + 1.0, reference[1]];
        let mut cfg = SimulationConfig::new(0.0, 1, 10, 2, 1);
        cfg.init = InitRule::Explicit { w: offset };
        let traj = run(&cfg, &p, &mix, &act).unwrap();
        let m = measure_msd(&traj, SteadyWindow::default()).unwrap();
        assert!((m.msd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fedavg_partial_full_subset_equals_fedavg_full() {
        let p = problem(8);
        let a = build_metropolis(&Topology::ring(8).unwrap()).unwrap();
        let model = ActivationModel::uniform(8, 0.5).unwrap();
        let full = apply_preset(Preset::FedavgFull, &a, &model, 3).unwrap();
        let part = apply_preset(Preset::FedavgPartial { subset: 8 }, &a, &model, 3).unwrap();
        let cfg = SimulationConfig::new(0.01, 3, 40, 2, 5);
        let x = run(&cfg, &p, &full.mixing, &full.activation).unwrap();
        let y = run(&cfg, &p, &part.mixing, &part.activation).unwrap();
        assert_eq!(x.msd, y.msd);
        assert!(apply_preset(Preset::FedavgPartial { subset: 9 }, &a, &model, 3).is_err());
    }

    #[test]
    fn fedavg_full_one_block_reaches_consensus() {
        let p = problem(4);
        let a = build_metropolis(&Topology::ring(4).unwrap()).unwrap();
        let plan = apply_preset(Preset::FedavgFull, &a, &ActivationModel::full(4), 3).unwrap();
        let cfg = SimulationConfig::new(0.05, 3, 1, 1, 2);
        let sim = Simulator::new(&p, &plan.mixing, &plan.activation, &cfg).unwrap();
        let mut state = NetworkState::uniform(4, &[0.0, 0.0]);
        sim.advance_block(&mut state, 0).unwrap();
        for k in 1..4 {
            for j in 0..2 {
                assert!((state.model(k)[j] - state.model(0)[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn presets_fix_local_steps() {
        let a = build_metropolis(&Topology::ring(3).unwrap()).unwrap();
        let model = ActivationModel::uniform(3, 0.5).unwrap();
        assert_eq!(
            apply_preset(Preset::StandardDiffusion, &a, &model, 7)
                .unwrap()
                .local_steps,
            1
        );
        assert_eq!(
            apply_preset(Preset::AsyncDiffusion, &a, &model, 7)
                .unwrap()
                .local_steps,
            1
        );
        let dfl = apply_preset(Preset::DecentralizedFl, &a, &model, 7).unwrap();
        assert_eq!(dfl.local_steps, 7);
        assert_eq!(dfl.activation.marginals(), vec![1.0; 3]);
    }

    #[test]
    fn convergence_time_of_geometric_curve() {
        let msd: Vec<f64> = (0..50).map(|i| 1.0 + 9.0 * 0.5f64.powi(i)).collect();
        let traj = TrajectoryRecord {
            blocks: (0..50).collect(),
            fourth: msd.clone(),
            msd,
            per_agent: None,
            digests: vec![0; 50],
            reference: DVector::zeros(1),
            repetitions: 1,
            agents: 1,
            local_steps: 1,
        };
        // excess 9·2^-i ≤ 0.9 first at i = 4
        assert_eq!(convergence_time(&traj, 1.0, 0.1), Some(4));
    }
}
