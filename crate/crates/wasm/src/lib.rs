//! Browser bindings for the interactive demo page in `web/`.
//!
//! Every operation builds on the desk profile: eight agents on a random
//! geometric graph with a two-dimensional least-squares problem.

use difflocal::harness::{desk_profile, prepare, sweep, RunConfiguration, SweepAxis, SweepSection};
use difflocal::netgraph::CombinationMatrix;
use difflocal::participation::{effective_matrix, expected_matrix, pattern_stream, ActivationSpec};
use wasm_bindgen::prelude::*;

/// Upper bound on recorded points per curve, to keep the page responsive.
const MAX_POINTS: usize = 400;

fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn demo_config(mu: f64, local_steps: u32, q: f64, blocks: u32, seed: u32) -> RunConfiguration {
    let mut cfg = desk_profile();
    cfg.seed = seed as u64;
    cfg.simulation.mu = mu;
    cfg.simulation.local_steps = local_steps as usize;
    cfg.simulation.blocks = blocks as usize;
    cfg.simulation.repetitions = 2;
    cfg.simulation.record_every = (blocks as usize / MAX_POINTS).max(1);
    if q > 0.0 {
        cfg.activation = ActivationSpec::Uniform { q };
    }
    cfg
}

/// A simulated learning curve with its steady-state theory line, in dB.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Curve {
    blocks: Vec<f64>,
    msd_db: Vec<f64>,
    steady_db: f64,
    theory_db: f64,
}

#[wasm_bindgen]
impl Curve {
    #[wasm_bindgen(getter)]
    pub fn blocks(&self) -> Vec<f64> {
        self.blocks.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn msd_db(&self) -> Vec<f64> {
        self.msd_db.clone()
    }

    /// Average over the final fifth of the run.
    #[wasm_bindgen(getter)]
    pub fn steady_db(&self) -> f64 {
        self.steady_db
    }

    #[wasm_bindgen(getter)]
    pub fn theory_db(&self) -> f64 {
        self.theory_db
    }
}

/// Runs the desk problem with step size `mu`, `local_steps` local updates
/// and uniform activation probability `q` (`q = 0` keeps the profile's
/// random per-agent probabilities).
#[wasm_bindgen]
pub fn learning_curve(
    mu: f64,
    local_steps: u32,
    q: f64,
    blocks: u32,
    seed: u32,
) -> Result<Curve, String> {
    let exp = prepare(&demo_config(mu, local_steps, q, blocks, seed)).map_err(|e| e.to_string())?;
    let sim = exp.simulate().map_err(|e| e.to_string())?;
    let theory = exp.theory().map_err(|e| e.to_string())?;
    Ok(Curve {
        blocks: sim.trajectory.blocks.iter().map(|&b| b as f64).collect(),
        msd_db: sim.trajectory.msd.iter().map(|&m| to_db(m)).collect(),
        steady_db: to_db(sim.measurement.msd),
        theory_db: to_db(theory.msd),
    })
}

/// Steady-state MSD against one parameter.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Sweep {
    values: Vec<f64>,
    simulated_db: Vec<f64>,
    theory_db: Vec<f64>,
    convergence: Vec<f64>,
}

#[wasm_bindgen]
impl Sweep {
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn simulated_db(&self) -> Vec<f64> {
        self.simulated_db.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn theory_db(&self) -> Vec<f64> {
        self.theory_db.clone()
    }

    /// Blocks until the excess MSD falls to 10% of its initial value;
    /// `NaN` when that never happens within the run.
    #[wasm_bindgen(getter)]
    pub fn convergence(&self) -> Vec<f64> {
        self.convergence.clone()
    }
}

/// Sweeps `axis` ("mu", "local-steps" or "q") over `values`, holding the
/// other parameters at the given levels.
#[wasm_bindgen]
pub fn msd_sweep(
    axis: &str,
    values: Vec<f64>,
    mu: f64,
    local_steps: u32,
    q: f64,
    blocks: u32,
    seed: u32,
) -> Result<Sweep, String> {
    let axis = match axis {
        "mu" => SweepAxis::Mu,
        "local-steps" => SweepAxis::LocalSteps,
        "q" => SweepAxis::Activation,
        other => return Err(format!("unknown sweep axis `{other}`")),
    };
    let mut cfg = demo_config(mu, local_steps, q, blocks, seed);
    cfg.sweep = Some(SweepSection { axis, values });
    let points = sweep(&cfg).map_err(|e| e.to_string())?;
    Ok(Sweep {
        values: points.iter().map(|p| p.value).collect(),
        simulated_db: points.iter().map(|p| p.msd_db).collect(),
        theory_db: points
            .iter()
            .map(|p| p.theory.map_or(f64::NAN, to_db))
            .collect(),
        convergence: points
            .iter()
            .map(|p| p.convergence_block.map_or(f64::NAN, |b| b as f64))
            .collect(),
    })
}

/// One block's combination matrix next to its expectation.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct MatrixView {
    agents: usize,
    active: Vec<u8>,
    effective: Vec<f64>,
    expected: Vec<f64>,
}

#[wasm_bindgen]
impl MatrixView {
    #[wasm_bindgen(getter)]
    pub fn agents(&self) -> usize {
        self.agents
    }

    /// `1` for agents that participate in the block.
    #[wasm_bindgen(getter)]
    pub fn active(&self) -> Vec<u8> {
        self.active.clone()
    }

    /// Row-major `K × K` weights used at the combination step.
    #[wasm_bindgen(getter)]
    pub fn effective(&self) -> Vec<f64> {
        self.effective.clone()
    }

    /// Row-major `K × K` average over activation patterns.
    #[wasm_bindgen(getter)]
    pub fn expected(&self) -> Vec<f64> {
        self.expected.clone()
    }
}

fn row_major(m: &CombinationMatrix) -> Vec<f64> {
    let k = m.agent_count();
    (0..k)
        .flat_map(|r| (0..k).map(move |c| m.weight(r, c)))
        .collect()
}

/// Draws the activation pattern of `block` and returns the effective
/// combination matrix alongside its expectation.
#[wasm_bindgen]
pub fn combination_view(q: f64, seed: u32, block: u32) -> Result<MatrixView, String> {
    let exp = prepare(&demo_config(0.01, 1, q, 1, seed)).map_err(|e| e.to_string())?;
    let pattern = exp
        .plan
        .activation
        .sample(&mut pattern_stream(seed as u64, 0, block as u64));
    let effective = effective_matrix(&exp.graph, &pattern, 1, 1).map_err(|e| e.to_string())?;
    let expected = expected_matrix(&exp.graph, &exp.model).map_err(|e| e.to_string())?;
    Ok(MatrixView {
        agents: exp.graph.agent_count(),
        active: pattern.as_slice().iter().map(|&a| a as u8).collect(),
        effective: row_major(&effective),
        expected: row_major(&expected),
    })
}
