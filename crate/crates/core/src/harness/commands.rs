//! Subcommand bodies: build an experiment from a document, run it, write
//! plot data and a JSON summary.

use std::path::Path;

use serde::Serialize;

use super::config::{ProblemSource, RunConfiguration, SweepAxis};
use super::plotdata::{curves_csv, to_db, trajectory_csv, Series};
use super::HarnessError;
use crate::engine::{
    apply_preset, convergence_time, measure_msd, run, MsdMeasurement, PresetPlan, SimulationConfig,
    SteadyWindow, TrajectoryRecord,
};
use crate::msdtheory::{msd_value, Approximations, ForcingSummary, MsdInputs, MsdReport};
use crate::netgraph::{build_metropolis, CombinationMatrix, Topology};
use crate::participation::{ActivationModel, ActivationSpec};
use crate::problems::{generate_synthetic, QuadraticProblem, RegressionDataset};
use crate::rng::{self, Purpose};

/// A configuration resolved into concrete objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfiguration,
    pub problem: QuadraticProblem,
    pub topology: Topology,
    pub graph: CombinationMatrix,
    pub model: ActivationModel,
    pub plan: PresetPlan,
}

pub fn prepare(cfg: &RunConfiguration) -> Result<Experiment, HarnessError> {
    cfg.validate()?;
    let topology = cfg.topology.build()?;
    let graph = build_metropolis(&topology)?;
    let k = topology.agent_count();
    let model = cfg.activation.build(k)?;
    let problem = match &cfg.problem {
        ProblemSource::Synthetic(spec) => generate_synthetic(spec)?,
        ProblemSource::Dataset(ds) => {
            let text =
                std::fs::read_to_string(&ds.path).map_err(|e| HarnessError::io(&ds.path, e))?;
            QuadraticProblem::new(RegressionDataset::from_columnar(&text)?, ds.ridge)?
        }
    };
    if problem.agent_count() != k {
        return Err(HarnessError::Config(format!(
            "problem has {} agents but the topology has {k}",
            problem.agent_count()
        )));
    }
    let plan = apply_preset(
        cfg.simulation.preset,
        &graph,
        &model,
        cfg.simulation.local_steps,
    )?;
    Ok(Experiment {
        config: cfg.clone(),
        problem,
        topology,
        graph,
        model,
        plan,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutcome {
    pub trajectory: TrajectoryRecord,
    pub measurement: MsdMeasurement,
    pub convergence_block: Option<usize>,
}

impl Experiment {
    pub fn engine_config(&self) -> SimulationConfig {
        let mut c = self.config.simulation.engine_config(self.config.seed);
        c.local_steps = self.plan.local_steps;
        c.record_agents = self.config.output.per_agent;
        c
    }

    pub fn simulate(&self) -> Result<SimulationOutcome, HarnessError> {
        let trajectory = run(
            &self.engine_config(),
            &self.problem,
            &self.plan.mixing,
            &self.plan.activation,
        )?;
        let measurement = measure_msd(
            &trajectory,
            SteadyWindow::FinalFraction(self.config.simulation.steady_fraction),
        )?;
        let convergence_block = convergence_time(&trajectory, measurement.msd, 0.1);
        Ok(SimulationOutcome {
            trajectory,
            measurement,
            convergence_block,
        })
    }

    pub fn theory_inputs(&self) -> Result<MsdInputs, HarnessError> {
        let s = &self.config.simulation;
        Ok(MsdInputs::from_problem(
            &self.problem,
            &self.plan.mixing,
            &self.plan.activation,
            s.mu,
            self.plan.local_steps,
            s.mode,
        )?)
    }

    pub fn theory(&self) -> Result<MsdReport, HarnessError> {
        let inputs = self.theory_inputs()?;
        Ok(msd_value(
            &inputs,
            self.config.theory.expectation_mode(&self.plan.activation),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheorySummary {
    pub msd: f64,
    pub msd_db: f64,
    pub msd_textbook_mean: f64,
    pub spectral_radius: f64,
    pub g_minus_identity: f64,
    pub relative_residual: f64,
    pub patterns: usize,
    pub monte_carlo: bool,
    pub forcing: ForcingSummary,
    pub approximations: Approximations,
}

impl From<&MsdReport> for TheorySummary {
    fn from(r: &MsdReport) -> Self {
        Self {
            msd: r.msd,
            msd_db: to_db(r.msd),
            msd_textbook_mean: r.msd_textbook_mean,
            spectral_radius: r.spectral_radius,
            g_minus_identity: r.g_minus_identity,
            relative_residual: r.relative_residual,
            patterns: r.patterns,
            monte_carlo: r.monte_carlo,
            forcing: r.forcing.clone(),
            approximations: r.approximations.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub agents: usize,
    pub mu: f64,
    pub local_steps: usize,
    pub blocks: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub activation_probabilities: Vec<f64>,
    pub msd: f64,
    pub msd_db: f64,
    pub fourth_moment: f64,
    pub stationary: bool,
    pub window_start_block: usize,
    pub convergence_block: Option<usize>,
    pub theory: Option<TheorySummary>,
    /// `|theory − simulation| / simulation`.
    pub relative_gap: Option<f64>,
}

fn summarize(
    exp: &Experiment,
    sim: &SimulationOutcome,
    theory: Option<&MsdReport>,
) -> SimulationSummary {
    let s = &exp.config.simulation;
    let m = &sim.measurement;
    SimulationSummary {
        agents: exp.problem.agent_count(),
        mu: s.mu,
        local_steps: exp.plan.local_steps,
        blocks: s.blocks,
        repetitions: s.repetitions,
        seed: exp.config.seed,
        activation_probabilities: exp.plan.activation.marginals(),
        msd: m.msd,
        msd_db: to_db(m.msd),
        fourth_moment: m.fourth_moment,
        stationary: m.stationary,
        window_start_block: m.window_start_block,
        convergence_block: sim.convergence_block,
        theory: theory.map(TheorySummary::from),
        relative_gap: theory.map(|t| (t.msd - m.msd).abs() / m.msd),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| HarnessError::io(&path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("summaries serialise") + "\n"
}

/// `simulate`: writes `trajectory.csv` and `summary.json`.
pub fn cmd_simulate(cfg: &RunConfiguration) -> Result<SimulationSummary, HarnessError> {
    let exp = prepare(cfg)?;
    let sim = exp.simulate()?;
    let theory = if cfg.theory.enabled {
        Some(exp.theory()?)
    } else {
        None
    };
    let summary = summarize(&exp, &sim, theory.as_ref());
    let dir = &cfg.output.directory;
    write_file(dir, "trajectory.csv", &trajectory_csv(&sim.trajectory))?;
    write_file(dir, "summary.json", &to_json(&summary))?;
    Ok(summary)
}

/// `theory`: writes `theory.json`.
pub fn cmd_theory(cfg: &RunConfiguration) -> Result<TheorySummary, HarnessError> {
    let exp = prepare(cfg)?;
    let summary = TheorySummary::from(&exp.theory()?);
    write_file(&cfg.output.directory, "theory.json", &to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seed: u64,
    pub msd: f64,
    pub msd_db: f64,
    pub fourth_moment: f64,
    pub stationary: bool,
    pub convergence_block: Option<usize>,
    pub theory: Option<f64>,
    #[serde(skip)]
    pub series: Series,
}

fn with_axis(cfg: &RunConfiguration, axis: SweepAxis, value: f64) -> RunConfiguration {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Mu => c.simulation.mu = value,
        SweepAxis::LocalSteps => c.simulation.local_steps = value as usize,
        SweepAxis::Activation => c.activation = ActivationSpec::Uniform { q: value },
    }
    c
}

fn axis_label(axis: SweepAxis, value: f64) -> String {
    match axis {
        SweepAxis::Mu => format!("mu={value}"),
        SweepAxis::LocalSteps => format!("T={value}"),
        SweepAxis::Activation => format!("q={value}"),
    }
}

fn run_point(
    cfg: &RunConfiguration,
    axis: SweepAxis,
    value: f64,
) -> Result<SweepPoint, HarnessError> {
    run_point_inner(cfg, axis, value).map_err(|e| match e {
        HarnessError::Config(m) => {
            HarnessError::Config(format!("sweep point {}: {m}", axis_label(axis, value)))
        }
        HarnessError::Numerical(m) => {
            HarnessError::Numerical(format!("sweep point {}: {m}", axis_label(axis, value)))
        }
        other => other,
    })
}

fn run_point_inner(
    cfg: &RunConfiguration,
    axis: SweepAxis,
    value: f64,
) -> Result<SweepPoint, HarnessError> {
    let exp = prepare(cfg)?;
    let sim = exp.simulate()?;
    let theory = if cfg.theory.enabled {
        Some(exp.theory()?.msd)
    } else {
        None
    };
    Ok(SweepPoint {
        value,
        seed: cfg.seed,
        msd: sim.measurement.msd,
        msd_db: to_db(sim.measurement.msd),
        fourth_moment: sim.measurement.fourth_moment,
        stationary: sim.measurement.stationary,
        convergence_block: sim.convergence_block,
        theory,
        series: Series {
            label: axis_label(axis, value),
            blocks: sim.trajectory.blocks,
            msd: sim.trajectory.msd,
            theory,
        },
    })
}

fn run_points(
    configs: Vec<(RunConfiguration, f64)>,
    axis: SweepAxis,
) -> Result<Vec<SweepPoint>, HarnessError> {
    #[cfg(feature = "parallel")]
    let points: Vec<_> = {
        use rayon::prelude::*;
        configs
            .par_iter()
            .map(|(c, v)| run_point(c, axis, *v))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let points: Vec<_> = configs
        .iter()
        .map(|(c, v)| run_point(c, axis, *v))
        .collect();
    points.into_iter().collect()
}

/// Every sweep value with its own seed derived from the master seed.
pub fn sweep(cfg: &RunConfiguration) -> Result<Vec<SweepPoint>, HarnessError> {
    cfg.validate()?;
    let section = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| HarnessError::Config("the configuration has no [sweep] section".into()))?;
    let configs = section
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut c = with_axis(cfg, section.axis, v);
            c.seed = rng::derive_seed(cfg.seed, Purpose::Sweep, &[i as u64]);
            (c, v)
        })
        .collect();
    run_points(configs, section.axis)
}

/// `sweep`: writes `sweep.json` and `sweep_curves.csv`.
pub fn cmd_sweep(cfg: &RunConfiguration) -> Result<Vec<SweepPoint>, HarnessError> {
    let points = sweep(cfg)?;
    let series: Vec<Series> = points.iter().map(|p| p.series.clone()).collect();
    write_file(&cfg.output.directory, "sweep.json", &to_json(&points))?;
    write_file(
        &cfg.output.directory,
        "sweep_curves.csv",
        &curves_csv(&series)?,
    )?;
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    /// One learning curve against its theory line.
    Fig2,
    /// Uniform participation `q ∈ {0.1, 0.5, 0.9}` at `T = 1`.
    Fig4,
    /// Full participation with `T ∈ {2, 5, 10}`.
    Fig5,
}

impl Figure {
    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig4 => "fig4",
            Figure::Fig5 => "fig5",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureOutcome {
    pub figure: Figure,
    pub points: Vec<SweepPoint>,
    /// Named ordering checks and whether they held.
    pub checks: Vec<(String, bool)>,
}

fn strictly_decreasing<T: PartialOrd>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn strictly_increasing<T: PartialOrd>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0])
}

fn convergence_blocks(points: &[SweepPoint]) -> Vec<usize> {
    points
        .iter()
        .map(|p| p.convergence_block.unwrap_or(usize::MAX))
        .collect()
}

/// Runs a figure's experiments on top of `cfg`. Series share the master seed.
pub fn reproduce(cfg: &RunConfiguration, figure: Figure) -> Result<FigureOutcome, HarnessError> {
    cfg.validate()?;
    let (axis, values, base) = match figure {
        Figure::Fig2 => (SweepAxis::Mu, vec![cfg.simulation.mu], cfg.clone()),
        Figure::Fig4 => {
            let mut base = cfg.clone();
            base.simulation.local_steps = 1;
            (SweepAxis::Activation, vec![0.1, 0.5, 0.9], base)
        }
        Figure::Fig5 => {
            let mut base = cfg.clone();
            base.activation = ActivationSpec::Uniform { q: 1.0 };
            (SweepAxis::LocalSteps, vec![2.0, 5.0, 10.0], base)
        }
    };
    let configs = values
        .iter()
        .map(|&v| (with_axis(&base, axis, v), v))
        .collect();
    let points = run_points(configs, axis)?;
    let msd: Vec<f64> = points.iter().map(|p| p.msd).collect();
    let theory: Option<Vec<f64>> = points.iter().map(|p| p.theory).collect();
    let mut checks = Vec::new();
    match figure {
        Figure::Fig2 => {
            if let Some(t) = points[0].theory {
                let gap = (t - points[0].msd).abs() / points[0].msd;
                checks.push(("theory within 15% of simulation".to_string(), gap <= 0.15));
            }
        }
        Figure::Fig4 => {
            checks.push((
                "MSD decreases with q".to_string(),
                strictly_decreasing(&msd),
            ));
            checks.push((
                "convergence time decreases with q".to_string(),
                strictly_decreasing(&convergence_blocks(&points)),
            ));
            if let Some(t) = &theory {
                checks.push((
                    "theory MSD decreases with q".to_string(),
                    strictly_decreasing(t),
                ));
            }
        }
        Figure::Fig5 => {
            checks.push((
                "MSD increases with T".to_string(),
                strictly_increasing(&msd),
            ));
            checks.push((
                "convergence time decreases with T".to_string(),
                strictly_decreasing(&convergence_blocks(&points)),
            ));
            if let Some(t) = &theory {
                checks.push((
                    "theory MSD increases with T".to_string(),
                    strictly_increasing(t),
                ));
            }
        }
    }
    Ok(FigureOutcome {
        figure,
        points,
        checks,
    })
}

/// `reproduce-figN`: writes `<fig>.csv` (dB curves) and `<fig>.json`.
pub fn cmd_reproduce(
    cfg: &RunConfiguration,
    figure: Figure,
) -> Result<FigureOutcome, HarnessError> {
    let outcome = reproduce(cfg, figure)?;
    let series: Vec<Series> = outcome.points.iter().map(|p| p.series.clone()).collect();
    let dir = &cfg.output.directory;
    write_file(
        dir,
        &format!("{}.csv", figure.name()),
        &curves_csv(&series)?,
    )?;
    write_file(dir, &format!("{}.json", figure.name()), &to_json(&outcome))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::super::config::{desk_profile, SweepSection};
    use super::*;

    fn small() -> RunConfiguration {
        let mut cfg = desk_profile();
        cfg.simulation.blocks = 400;
        cfg.simulation.repetitions = 2;
        cfg
    }

    #[test]
    fn prepare_builds_consistent_objects() {
        let exp = prepare(&small()).unwrap();
        assert_eq!(exp.problem.agent_count(), 8);
        assert_eq!(exp.graph.agent_count(), 8);
        assert!(exp.topology.is_connected());
    }

    #[test]
    fn sweep_requires_section_and_derives_seeds() {
        let mut cfg = small();
        assert!(matches!(sweep(&cfg), Err(HarnessError::Config(_))));
        cfg.theory.enabled = false;
        cfg.sweep = Some(SweepSection {
            axis: SweepAxis::Mu,
            values: vec![0.01, 0.02],
        });
        let points = sweep(&cfg).unwrap();
        assert_eq!(points.len(), 2);
        assert_ne!(points[0].seed, points[1].seed);
        assert_eq!(sweep(&cfg).unwrap(), points);
    }

    #[test]
    fn divergence_maps_to_numerical_exit_code() {
        let mut cfg = small();
        cfg.simulation.mu = 50.0;
        cfg.theory.enabled = false;
        let err = prepare(&cfg).unwrap().simulate().unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn diverging_sweep_point_is_named() {
        let mut cfg = small();
        cfg.theory.enabled = false;
        cfg.sweep = Some(SweepSection {
            axis: SweepAxis::Mu,
            values: vec![0.01, 50.0],
        });
        let err = sweep(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("mu=50"), "{err}");
    }
}
