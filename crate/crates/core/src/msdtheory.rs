//! Closed-form steady-state MSD.
//!
//! With `𝒲̃ = col{w_ref − w_k}` and the Hessians frozen at `w_ref`, one block
//! of the long-term model reads
//!
//! ```text
//! 𝒲̃' = 𝒜ᵀ D^T 𝒲̃ − 𝒜ᵀ S b + Σ_t 𝒜ᵀ D^t ℳ s_t,     D = I − ℳℋ,  S = Σ_{t<T} D^t ℳ
//! ```
//!
//! where `b = −col{∇J_k(w_ref)}` and `s_t` is gradient noise with
//! block-diagonal covariance `diag{R_k}`. Vectorising the second moment gives
//! `z' = 𝒢 z + y` with `𝒢 = E[𝒜ᵀD^T ⊗_b 𝒜ᵀD^T]`, and the MSD is
//! `(1/K) zᵀ bvec(I)` at the fixed point. `⊗_b` and `bvec` are the plain
//! Kronecker product and column stacking, which satisfy
//! `bvec(E X Fᵀ) = (F ⊗_b E) bvec(X)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    block_diag, kron, kron_identity, max_abs, spectral_radius, unvec_cols, vec_cols,
};
use crate::participation::{
    active_step_sizes, ActivationPattern, ActivationRule, MixingRule, ParticipationError, StepMode,
};
use crate::problems::{ProblemError, QuadraticProblem};
use crate::rng::{self, Purpose};

/// Default pattern budget for exact enumeration (`K ≤ 12` under Bernoulli).
pub const DEFAULT_ENUMERATION_BUDGET: usize = 1 << 12;
/// Default Monte-Carlo pattern count.
pub const DEFAULT_MC_SAMPLES: usize = 200_000;
/// Relative residual allowed in the final linear solve.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid theory inputs: {0}")]
    Inputs(String),
    #[error("spectral radius of the second-moment operator is {spectral_radius:.6} >= 1; the step size is outside the stability range")]
    Unstable { spectral_radius: f64 },
    #[error("I − 𝒢 is singular; the step size is outside the stability range")]
    Singular,
    #[error("linear solve residual {relative:.3e} exceeds tolerance")]
    Residual { relative: f64 },
    #[error("exact enumeration needs {needed} patterns, over the budget of {budget}; use Monte-Carlo mode")]
    OverBudget { needed: f64, budget: usize },
    #[error("Monte-Carlo mode needs at least two samples")]
    TooFewSamples,
    #[error(transparent)]
    Participation(ParticipationError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

impl From<ParticipationError> for TheoryError {
    fn from(e: ParticipationError) -> Self {
        match e {
            ParticipationError::EnumerationBudget { needed, budget } => {
                TheoryError::OverBudget { needed, budget }
            }
            other => TheoryError::Participation(other),
        }
    }
}

/// How the expectations over activation patterns are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExpectationMode {
    Exact { budget: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl ExpectationMode {
    pub fn exact() -> Self {
        ExpectationMode::Exact {
            budget: DEFAULT_ENUMERATION_BUDGET,
        }
    }

    /// Exact when the support fits the default budget, Monte Carlo otherwise.
    pub fn auto(rule: &ActivationRule, samples: usize, seed: u64) -> Self {
        if rule.support_size() <= DEFAULT_ENUMERATION_BUDGET as f64 {
            Self::exact()
        } else {
            ExpectationMode::MonteCarlo { samples, seed }
        }
    }
}

/// `bvec(X)`: column stacking.
pub fn bvec(x: &DMatrix<f64>) -> DVector<f64> {
    vec_cols(x)
}

/// Inverse of [`bvec`] for a square `n × n` matrix.
pub fn unbvec(v: &DVector<f64>) -> Result<DMatrix<f64>, TheoryError> {
    let n = (v.len() as f64).sqrt().round() as usize;
    if n * n != v.len() {
        return Err(TheoryError::Dimension(format!(
            "{} is not a perfect square",
            v.len()
        )));
    }
    Ok(unvec_cols(v, n, n))
}

/// `A ⊗_b B`, so that `bvec(E X Fᵀ) = block_kron(F, E) · bvec(X)`.
pub fn block_kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    kron(a, b)
}

/// Everything the closed form needs, evaluated at the reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdInputs {
    /// `H_k` (M × M each).
    pub hessians: Vec<DMatrix<f64>>,
    /// `R_k` (M × M each).
    pub noise: Vec<DMatrix<f64>>,
    /// `b = −col{∇J_k(w_ref)}`.
    pub bias: DVector<f64>,
    pub mixing: MixingRule,
    pub activation: ActivationRule,
    pub mu: f64,
    pub local_steps: usize,
    pub mode: StepMode,
}

impl MsdInputs {
    /// Inputs at the drifted optimum (plain steps) or at the unweighted
    /// optimum (drift-corrected steps).
    pub fn from_problem(
        problem: &QuadraticProblem,
        mixing: &MixingRule,
        activation: &ActivationRule,
        mu: f64,
        local_steps: usize,
        mode: StepMode,
    ) -> Result<Self, TheoryError> {
        let w_ref = match mode {
            StepMode::Plain => problem.drifted_optimum(&activation.marginals())?,
            StepMode::DriftCorrected => problem.optimum()?,
        };
        let k = problem.agent_count();
        let hessians = (0..k)
            .map(|i| problem.hessian(i).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let noise = (0..k)
            .map(|i| problem.noise_covariance(i, &w_ref))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs = Self {
            hessians,
            noise,
            bias: problem.bias_vector(&w_ref)?,
            mixing: mixing.clone(),
            activation: activation.clone(),
            mu,
            local_steps,
            mode,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn agent_count(&self) -> usize {
        self.hessians.len()
    }

    pub fn dim(&self) -> usize {
        self.hessians.first().map_or(0, |h| h.nrows())
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let k = self.agent_count();
        let m = self.dim();
        if k == 0 || m == 0 {
            return Err(TheoryError::Dimension("no agents or zero dimension".into()));
        }
        if self.noise.len() != k
            || self.mixing.agent_count() != k
            || self.activation.agent_count() != k
            || self.bias.len() != k * m
        {
            return Err(TheoryError::Dimension(format!(
                "{k} Hessians, {} noise blocks, {}-agent mixing, {}-agent activation, bias of length {}",
                self.noise.len(),
                self.mixing.agent_count(),
                self.activation.agent_count(),
                self.bias.len()
            )));
        }
        for (i, (h, r)) in self.hessians.iter().zip(&self.noise).enumerate() {
            if h.shape() != (m, m) || r.shape() != (m, m) {
                return Err(TheoryError::Dimension(format!(
                    "agent {i} has non-{m}×{m} blocks"
                )));
            }
            if max_abs(&(h - h.transpose())) > 1e-10 || max_abs(&(r - r.transpose())) > 1e-10 {
                return Err(TheoryError::Inputs(format!(
                    "agent {i} has a non-symmetric block"
                )));
            }
            if h.clone().symmetric_eigenvalues().min() <= 0.0 {
                return Err(TheoryError::Inputs(format!(
                    "H_{i} is not positive definite"
                )));
            }
            if r.clone().symmetric_eigenvalues().min() < -1e-12 {
                return Err(TheoryError::Inputs(format!(
                    "R_{i} is not positive semidefinite"
                )));
            }
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(TheoryError::Inputs(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        if self.local_steps == 0 {
            return Err(TheoryError::Inputs("local_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn active_steps(&self) -> Result<Vec<f64>, TheoryError> {
        Ok(active_step_sizes(
            self.mu,
            self.mode,
            &self.activation.marginals(),
        )?)
    }
}

/// Deterministic quantities for one activation pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorTerms {
    /// `𝒜ᵀ D^T`.
    pub transition: DMatrix<f64>,
    /// `𝒜ᵀ S`.
    pub forcing: DMatrix<f64>,
    /// `𝒜ᵀ D^T ⊗_b 𝒜ᵀ D^T`.
    pub g_term: DMatrix<f64>,
    /// `Σ_t bvec(X_t diag{R_k} X_tᵀ)` with `X_t = 𝒜ᵀ D^t ℳ`.
    pub noise_term: DVector<f64>,
    /// `(𝒜ᵀ S b) ⊗_b (𝒜ᵀ S b)`.
    pub bias_term: DVector<f64>,
    /// `bvec(u fᵀ + f uᵀ)` with `u = 𝒜ᵀ D^T m`, `f = −𝒜ᵀ S b`, zero without a mean.
    pub cross_term: DVector<f64>,
}

struct PatternMatrices {
    /// `𝒜ᵀ` (KM × KM).
    at: DMatrix<f64>,
    /// `D_k^t` for t = 0..=T, per agent.
    powers: Vec<Vec<DMatrix<f64>>>,
    steps: Vec<f64>,
}

fn pattern_matrices(
    inputs: &MsdInputs,
    active_steps: &[f64],
    pattern: &ActivationPattern,
) -> Result<PatternMatrices, TheoryError> {
    let k = inputs.agent_count();
    let m = inputs.dim();
    let t = inputs.local_steps;
    let a = inputs.mixing.effective(pattern, t, t)?;
    let at = kron_identity(&a.weights().transpose(), m);
    let steps: Vec<f64> = (0..k)
        .map(|i| {
            if pattern.is_active(i) {
                active_steps[i]
            } else {
                0.0
            }
        })
        .collect();
    let identity = DMatrix::identity(m, m);
    let powers = (0..k)
        .map(|i| {
            let d = &identity - &inputs.hessians[i] * steps[i];
            let mut out = Vec::with_capacity(t + 1);
            out.push(identity.clone());
            for p in 1..=t {
                out.push(&out[p - 1] * &d);
            }
            out
        })
        .collect();
    Ok(PatternMatrices { at, powers, steps })
}

/// Per-pattern ingredients of `𝒢` and `y`. `mean` is the fixed point of the
/// first moment, needed only for the cross term.
pub fn sample_operator_terms(
    inputs: &MsdInputs,
    pattern: &ActivationPattern,
    mean: Option<&DVector<f64>>,
) -> Result<OperatorTerms, TheoryError> {
    inputs.validate()?;
    let steps = inputs.active_steps()?;
    operator_terms(inputs, &steps, pattern, mean)
}

fn operator_terms(
    inputs: &MsdInputs,
    active_steps: &[f64],
    pattern: &ActivationPattern,
    mean: Option<&DVector<f64>>,
) -> Result<OperatorTerms, TheoryError> {
    let (transition, forcing, pm) = transition_and_forcing(inputs, active_steps, pattern)?;
    let k = inputs.agent_count();
    let t_steps = inputs.local_steps;
    let g_term = block_kron(&transition, &transition);
    let r = block_diag(&inputs.noise);
    let km = k * inputs.dim();
    let mut noise_cov = DMatrix::zeros(km, km);
    for t in 0..t_steps {
        let blocks: Vec<DMatrix<f64>> = (0..k).map(|i| &pm.powers[i][t] * pm.steps[i]).collect();
        let x = &pm.at * block_diag(&blocks);
        noise_cov += &x * &r * x.transpose();
    }
    let f = -(&forcing * &inputs.bias);
    let bias_term = kron(
        &DMatrix::from_column_slice(km, 1, f.as_slice()),
        &DMatrix::from_column_slice(km, 1, f.as_slice()),
    )
    .column(0)
    .into_owned();
    let cross_term = match mean {
        Some(mean) => {
            let u = &transition * mean;
            let outer = &u * f.transpose();
            bvec(&(&outer + outer.transpose()))
        }
        None => DVector::zeros(km * km),
    };
    Ok(OperatorTerms {
        transition,
        forcing,
        g_term,
        noise_term: bvec(&noise_cov),
        bias_term,
        cross_term,
    })
}

fn transition_and_forcing(
    inputs: &MsdInputs,
    active_steps: &[f64],
    pattern: &ActivationPattern,
) -> Result<(DMatrix<f64>, DMatrix<f64>, PatternMatrices), TheoryError> {
    let pm = pattern_matrices(inputs, active_steps, pattern)?;
    let k = inputs.agent_count();
    let t_steps = inputs.local_steps;
    let d_t: Vec<DMatrix<f64>> = (0..k).map(|i| pm.powers[i][t_steps].clone()).collect();
    let s: Vec<DMatrix<f64>> = (0..k)
        .map(|i| {
            let mut acc = DMatrix::zeros(inputs.dim(), inputs.dim());
            for t in 0..t_steps {
                acc += &pm.powers[i][t];
            }
            acc * pm.steps[i]
        })
        .collect();
    let transition = &pm.at * block_diag(&d_t);
    let forcing = &pm.at * block_diag(&s);
    Ok((transition, forcing, pm))
}

/// Expectations over activation patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationEstimate {
    /// `𝒢`.
    pub g: DMatrix<f64>,
    /// `y` including the cross term.
    pub y: DVector<f64>,
    /// Fixed point of `E𝒲̃`.
    pub mean: DVector<f64>,
    /// `E[𝒜ᵀ D^T]`.
    pub transition: DMatrix<f64>,
    /// `E[𝒜ᵀ S]`.
    pub forcing: DMatrix<f64>,
    pub mode: ExpectationMode,
    /// Patterns evaluated.
    pub patterns: usize,
    /// Entrywise standard errors of `𝒢` and `y` (Monte Carlo only).
    pub g_stderr: Option<DMatrix<f64>>,
    pub y_stderr: Option<DVector<f64>>,
    pub spectral_radius: f64,
    /// `max |𝒢 − I|`, which shrinks like `μ`.
    pub g_minus_identity: f64,
}

fn welford<R: nalgebra::Dim, C: nalgebra::Dim>(
    mean: &mut nalgebra::OMatrix<f64, R, C>,
    m2: &mut nalgebra::OMatrix<f64, R, C>,
    x: &nalgebra::OMatrix<f64, R, C>,
    count: f64,
) where
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<R, C>,
{
    for ((mu, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(x.iter()) {
        let delta = v - *mu;
        *mu += delta / count;
        *s += delta * (v - *mu);
    }
}

/// Weighted pattern list: exact probabilities or equal Monte-Carlo weights.
fn pattern_list(
    inputs: &MsdInputs,
    mode: ExpectationMode,
) -> Result<Vec<(ActivationPattern, f64)>, TheoryError> {
    match mode {
        ExpectationMode::Exact { budget } => Ok(inputs.activation.enumerate(budget)?),
        ExpectationMode::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(TheoryError::TooFewSamples);
            }
            let mut rng = rng::stream(seed, Purpose::Theory, &[]);
            let w = 1.0 / samples as f64;
            Ok((0..samples)
                .map(|_| (inputs.activation.sample(&mut rng), w))
                .collect())
        }
    }
}

pub fn estimate_expectations(
    inputs: &MsdInputs,
    mode: ExpectationMode,
) -> Result<ExpectationEstimate, TheoryError> {
    inputs.validate()?;
    let steps = inputs.active_steps()?;
    let patterns = pattern_list(inputs, mode)?;
    let km = inputs.agent_count() * inputs.dim();
    let n2 = km * km;

    // First moment.
    let mut e_transition = DMatrix::zeros(km, km);
    let mut e_forcing = DMatrix::zeros(km, km);
    for (pattern, p) in &patterns {
        let (tr, fo, _) = transition_and_forcing(inputs, &steps, pattern)?;
        e_transition += tr * *p;
        e_forcing += fo * *p;
    }
    let lhs = DMatrix::identity(km, km) - &e_transition;
    let mean = lhs
        .lu()
        .solve(&(-(&e_forcing * &inputs.bias)))
        .ok_or(TheoryError::Singular)?;

    // Second moment.
    let monte_carlo = matches!(mode, ExpectationMode::MonteCarlo { .. });
    let mut g = DMatrix::zeros(n2, n2);
    let mut y = DVector::zeros(n2);
    // Monte-Carlo sums use Welford updates so a point mass has exactly zero spread.
    let mut g_m2 = monte_carlo.then(|| DMatrix::zeros(n2, n2));
    let mut y_m2 = monte_carlo.then(|| DVector::zeros(n2));
    for (i, (pattern, p)) in patterns.iter().enumerate() {
        let terms = operator_terms(inputs, &steps, pattern, Some(&mean))?;
        let y_i = terms.noise_term + terms.bias_term + terms.cross_term;
        if let (Some(gm), Some(ym)) = (g_m2.as_mut(), y_m2.as_mut()) {
            let count = (i + 1) as f64;
            welford(&mut g, gm, &terms.g_term, count);
            welford(&mut y, ym, &y_i, count);
        } else {
            g.zip_apply(&terms.g_term, |acc, v| *acc += p * v);
            y.zip_apply(&y_i, |acc, v| *acc += p * v);
        }
    }
    let n = patterns.len() as f64;
    let stderr = |m2: f64| (m2 / (n - 1.0) / n).sqrt();
    let g_stderr = g_m2.map(|m| m.map(stderr));
    let y_stderr = y_m2.map(|m| m.map(stderr));

    let radius = spectral_radius(&g);
    let g_minus_identity = max_abs(&(&g - DMatrix::identity(n2, n2)));
    if radius >= 1.0 {
        return Err(TheoryError::Unstable {
            spectral_radius: radius,
        });
    }
    Ok(ExpectationEstimate {
        g,
        y,
        mean,
        transition: e_transition,
        forcing: e_forcing,
        mode,
        patterns: patterns.len(),
        g_stderr,
        y_stderr,
        spectral_radius: radius,
        g_minus_identity,
    })
}

/// Magnitudes of the three forcing contributions, as `(1/K) trace` of each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForcingSummary {
    pub noise: f64,
    pub bias: f64,
    pub cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Approximations {
    /// `(1/K) tr unbvec(μT (I−μℋ)^{2T−2} (b⊗_b b + bvec diag{R_k}))`.
    pub local_updates: f64,
    /// The `T = 1` activation form; `None` for `T > 1`.
    pub activation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsdReport {
    pub msd: f64,
    #[serde(skip)]
    pub z: DVector<f64>,
    pub forcing: ForcingSummary,
    /// MSD computed with the textbook mean `−μ(I−B̄_T)⁻¹ Σ_t B̄_t b`, which
    /// pulls a scalar `μ` out of the random step-size matrix.
    pub msd_textbook_mean: f64,
    pub spectral_radius: f64,
    pub g_minus_identity: f64,
    pub relative_residual: f64,
    pub patterns: usize,
    pub monte_carlo: bool,
    pub approximations: Approximations,
}

fn trace_over_k(v: &DVector<f64>, k: usize) -> Result<f64, TheoryError> {
    Ok(unbvec(v)?.trace() / k as f64)
}

fn solve_fixed_point(
    g: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, f64), TheoryError> {
    let n = g.nrows();
    let lhs = DMatrix::identity(n, n) - g;
    let lu = lhs.clone().lu();
    let mut z = lu.solve(y).ok_or(TheoryError::Singular)?;
    let scale = y.norm();
    if scale == 0.0 {
        return Ok((DVector::zeros(n), 0.0));
    }
    let mut relative = (&lhs * &z - y).norm() / scale;
    if relative > SOLVE_TOLERANCE {
        // one round of iterative refinement
        let correction = lu.solve(&(y - &lhs * &z)).ok_or(TheoryError::Singular)?;
        z += correction;
        relative = (&lhs * &z - y).norm() / scale;
    }
    if !relative.is_finite() || relative > SOLVE_TOLERANCE {
        return Err(TheoryError::Residual { relative });
    }
    Ok((z, relative))
}

pub fn msd_value(inputs: &MsdInputs, mode: ExpectationMode) -> Result<MsdReport, TheoryError> {
    let est = estimate_expectations(inputs, mode)?;
    msd_from_estimate(inputs, &est)
}

pub fn msd_from_estimate(
    inputs: &MsdInputs,
    est: &ExpectationEstimate,
) -> Result<MsdReport, TheoryError> {
    let k = inputs.agent_count();
    let (z, relative_residual) = solve_fixed_point(&est.g, &est.y)?;
    let msd = trace_over_k(&z, k)?.max(0.0);

    // Split y into its parts for reporting, and redo the cross term with the
    // textbook mean.
    let steps = inputs.active_steps()?;
    let patterns = pattern_list(inputs, est.mode)?;
    let km = k * inputs.dim();
    let mut noise = DVector::zeros(km * km);
    let mut bias = DVector::zeros(km * km);
    let mut cross = DVector::zeros(km * km);
    let mut cross_textbook = DVector::zeros(km * km);
    let textbook = textbook_mean(inputs, &patterns, &steps)?;
    for (pattern, p) in &patterns {
        let terms = operator_terms(inputs, &steps, pattern, Some(&est.mean))?;
        noise += terms.noise_term * *p;
        bias += terms.bias_term * *p;
        cross += terms.cross_term * *p;
        let alt = operator_terms(inputs, &steps, pattern, Some(&textbook))?;
        cross_textbook += alt.cross_term * *p;
    }
    let (z_alt, _) = solve_fixed_point(&est.g, &(&noise + &bias + &cross_textbook))?;
    Ok(MsdReport {
        msd,
        forcing: ForcingSummary {
            noise: trace_over_k(&noise, k)?,
            bias: trace_over_k(&bias, k)?,
            cross: trace_over_k(&cross, k)?,
        },
        z,
        msd_textbook_mean: trace_over_k(&z_alt, k)?,
        spectral_radius: est.spectral_radius,
        g_minus_identity: est.g_minus_identity,
        relative_residual,
        patterns: est.patterns,
        monte_carlo: matches!(est.mode, ExpectationMode::MonteCarlo { .. }),
        approximations: Approximations {
            local_updates: approx_local_updates(inputs)?,
            activation: if inputs.local_steps == 1 {
                Some(approx_activation(inputs)?)
            } else {
                None
            },
        },
    })
}

/// `−μ(I − B̄_T)⁻¹ Σ_{t<T} B̄_t b` with `B̄_t = E 𝒜ᵀ(I − ℳℋ)^t`, in the sign
/// convention of `𝒲̃`.
fn textbook_mean(
    inputs: &MsdInputs,
    patterns: &[(ActivationPattern, f64)],
    steps: &[f64],
) -> Result<DVector<f64>, TheoryError> {
    let k = inputs.agent_count();
    let m = inputs.dim();
    let t_steps = inputs.local_steps;
    let km = k * m;
    let mut b_bar: Vec<DMatrix<f64>> = vec![DMatrix::zeros(km, km); t_steps + 1];
    for (pattern, p) in patterns {
        let pm = pattern_matrices(inputs, steps, pattern)?;
        for (t, acc) in b_bar.iter_mut().enumerate() {
            let blocks: Vec<DMatrix<f64>> = (0..k).map(|i| pm.powers[i][t].clone()).collect();
            *acc += (&pm.at * block_diag(&blocks)) * *p;
        }
    }
    let mut sum = DMatrix::zeros(km, km);
    for b in &b_bar[..t_steps] {
        sum += b;
    }
    let lhs = DMatrix::identity(km, km) - &b_bar[t_steps];
    let rhs = sum * &inputs.bias * -inputs.mu;
    lhs.lu().solve(&rhs).ok_or(TheoryError::Singular)
}

fn forcing_matrix(inputs: &MsdInputs) -> DMatrix<f64> {
    let r = block_diag(&inputs.noise);
    &inputs.bias * inputs.bias.transpose() + r
}

fn stacked_hessian(inputs: &MsdInputs) -> DMatrix<f64> {
    block_diag(&inputs.hessians)
}

/// The local-update form `μT (I − μℋ)^{2T−2} (b ⊗_b b + bvec diag{R_k})`
/// reduced to `(1/K) trace`. Only its trend in `T` is meaningful.
pub fn approx_local_updates(inputs: &MsdInputs) -> Result<f64, TheoryError> {
    inputs.validate()?;
    let h = stacked_hessian(inputs);
    let n = h.nrows();
    let d = DMatrix::identity(n, n) - h * inputs.mu;
    let mut p = DMatrix::identity(n, n);
    for _ in 1..inputs.local_steps {
        p = &p * &d;
    }
    let x = &p * forcing_matrix(inputs) * p.transpose();
    Ok(inputs.mu * inputs.local_steps as f64 * x.trace() / inputs.agent_count() as f64)
}

/// The `T = 1` activation form
/// `(I − (1 − μν)² E[𝒜⊗𝒜])⁻¹ μ² E[𝒜⊗𝒜] (b ⊗_b b + bvec diag{R_k})`
/// reduced to `(1/K) trace`, with the `O(μ)` contraction taken as `μν` for
/// `ν` the smallest Hessian eigenvalue. Only its trend in `q` is meaningful.
pub fn approx_activation(inputs: &MsdInputs) -> Result<f64, TheoryError> {
    inputs.validate()?;
    if inputs.local_steps != 1 {
        return Err(TheoryError::Inputs(
            "the activation approximation needs T = 1".into(),
        ));
    }
    let m = inputs.dim();
    let k = inputs.agent_count();
    let nu = inputs
        .hessians
        .iter()
        .map(|h| h.clone().symmetric_eigenvalues().min())
        .fold(f64::INFINITY, f64::min);
    let patterns = inputs
        .activation
        .enumerate(DEFAULT_ENUMERATION_BUDGET)
        .or_else(|_| {
            pattern_list(
                inputs,
                ExpectationMode::MonteCarlo {
                    samples: 20_000,
                    seed: 0,
                },
            )
        })?;
    let n = k * m;
    let mut e_aa = DMatrix::zeros(n * n, n * n);
    for (pattern, p) in &patterns {
        let a = inputs.mixing.effective(pattern, 1, 1)?;
        let at = kron_identity(&a.weights().transpose(), m);
        e_aa += kron(&at, &at) * *p;
    }
    let contraction = (1.0 - inputs.mu * nu).powi(2);
    let lhs = DMatrix::identity(n * n, n * n) - &e_aa * contraction;
    let rhs = &e_aa * bvec(&forcing_matrix(inputs)) * (inputs.mu * inputs.mu);
    let z = lhs.lu().solve(&rhs).ok_or(TheoryError::Singular)?;
    trace_over_k(&z, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_metropolis, CombinationMatrix, Topology};
    use crate::participation::ActivationModel;
    use proptest::prelude::*;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn two_agent_inputs(q: f64, noise: f64, bias: [f64; 2]) -> MsdInputs {
        MsdInputs {
            hessians: vec![scalar(1.0), scalar(2.0)],
            noise: vec![scalar(noise), scalar(noise * 2.0)],
            bias: DVector::from_column_slice(&bias),
            mixing: MixingRule::Graph(CombinationMatrix::averaging(2)),
            activation: ActivationRule::Bernoulli(ActivationModel::uniform(2, q).unwrap()),
            mu: 0.1,
            local_steps: 1,
            mode: StepMode::Plain,
        }
    }

    #[test]
    fn bvec_identity_examples() {
        let v = bvec(&DMatrix::identity(2, 2));
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(v.norm_squared(), 2.0);
        assert_eq!(
            block_kron(&DMatrix::identity(2, 2), &DMatrix::identity(3, 3)),
            DMatrix::identity(6, 6)
        );
    }

    proptest! {
        #[test]
        fn bvec_defining_identity(vals in proptest::collection::vec(-1.0f64..1.0, 48)) {
            let e = DMatrix::from_column_slice(4, 4, &vals[..16]);
            let x = DMatrix::from_column_slice(4, 4, &vals[16..32]);
            let f = DMatrix::from_column_slice(4, 4, &vals[32..]);
            let lhs = bvec(&(&e * &x * f.transpose()));
            let rhs = block_kron(&f, &e) * bvec(&x);
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn inactive_pattern_terms() {
        let inputs = two_agent_inputs(0.5, 1.0, [1.0, -1.0]);
        let t = sample_operator_terms(
            &inputs,
            &ActivationPattern::none(2),
            Some(&DVector::from_element(2, 0.3)),
        )
        .unwrap();
        assert_eq!(t.g_term, DMatrix::identity(4, 4));
        assert_eq!(t.noise_term.amax(), 0.0);
        assert_eq!(t.bias_term.amax(), 0.0);
        assert_eq!(t.cross_term.amax(), 0.0);
    }

    #[test]
    fn single_agent_reduction() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inputs = MsdInputs {
            hessians: vec![h.clone()],
            noise: vec![DMatrix::identity(2, 2)],
            bias: DVector::zeros(2),
            mixing: MixingRule::Graph(CombinationMatrix::averaging(1)),
            activation: ActivationRule::Bernoulli(ActivationModel::full(1)),
            mu: 0.05,
            local_steps: 1,
            mode: StepMode::Plain,
        };
        let t = sample_operator_terms(&inputs, &ActivationPattern::all(1), None).unwrap();
        let d = DMatrix::identity(2, 2) - h * 0.05;
        assert!((t.g_term - kron(&d, &d)).amax() < 1e-15);
    }

    #[test]
    fn two_agent_hand_expansion() {
        // T = 1, M = 1, both active, averaging: 𝒜ᵀ = ½·ones, D = diag(1−μ, 1−2μ).
        let inputs = two_agent_inputs(1.0, 1.0, [1.0, -2.0]);
        let t = sample_operator_terms(&inputs, &ActivationPattern::all(2), None).unwrap();
        let (d1, d2) = (0.9, 0.8);
        let tr = DMatrix::from_row_slice(2, 2, &[d1 / 2.0, d2 / 2.0, d1 / 2.0, d2 / 2.0]);
        assert!((&t.transition - &tr).amax() < 1e-15);
        // noise: X = 𝒜ᵀ μI, X R Xᵀ = μ²/4 (R1 + R2) ones
        let n = 0.01 / 4.0 * 3.0;
        assert!((t.noise_term - DVector::from_element(4, n)).amax() < 1e-15);
        // forcing f = −μ 𝒜ᵀ b = 0.1·0.5·(1,1)
        assert!((t.bias_term - DVector::from_element(4, 0.0025)).amax() < 1e-15);
    }

    #[test]
    fn no_forcing_means_zero_msd() {
        let inputs = two_agent_inputs(0.6, 0.0, [0.0, 0.0]);
        let r = msd_value(&inputs, ExpectationMode::exact()).unwrap();
        assert_eq!(r.msd, 0.0);
        let with_noise = msd_value(
            &two_agent_inputs(0.6, 1.0, [0.0, 0.0]),
            ExpectationMode::exact(),
        )
        .unwrap();
        assert!(with_noise.msd > 0.0);
    }

    #[test]
    fn point_mass_monte_carlo_is_exact() {
        let inputs = two_agent_inputs(1.0, 1.0, [1.0, -1.0]);
        let exact = estimate_expectations(&inputs, ExpectationMode::exact()).unwrap();
        let mc = estimate_expectations(
            &inputs,
            ExpectationMode::MonteCarlo {
                samples: 50,
                seed: 1,
            },
        )
        .unwrap();
        assert!((exact.g - &mc.g).amax() < 1e-14);
        assert_eq!(mc.g_stderr.unwrap().amax(), 0.0);
    }

    #[test]
    fn over_budget_suggests_monte_carlo() {
        let inputs = two_agent_inputs(0.5, 1.0, [1.0, -1.0]);
        let err = estimate_expectations(&inputs, ExpectationMode::Exact { budget: 2 }).unwrap_err();
        assert!(matches!(err, TheoryError::OverBudget { .. }));
        assert!(err.to_string().contains("Monte-Carlo"));
    }

    #[test]
    fn large_step_is_unstable() {
        let mut inputs = two_agent_inputs(1.0, 1.0, [1.0, -1.0]);
        inputs.mu = 1.5;
        assert!(matches!(
            estimate_expectations(&inputs, ExpectationMode::exact()),
            Err(TheoryError::Unstable { .. })
        ));
    }

    #[test]
    fn g_approaches_identity_with_mu() {
        let mut inputs = two_agent_inputs(0.5, 1.0, [1.0, -1.0]);
        inputs.mixing = MixingRule::Graph(CombinationMatrix::identity(2));
        let mut last = f64::INFINITY;
        for mu in [0.1, 0.01, 0.001] {
            inputs.mu = mu;
            let e = estimate_expectations(&inputs, ExpectationMode::exact()).unwrap();
            assert!(e.g_minus_identity < last);
            assert!(e.g_minus_identity < 3.0 * mu);
            last = e.g_minus_identity;
        }
    }

    #[test]
    fn approx_local_updates_at_one_step() {
        let inputs = two_agent_inputs(1.0, 1.0, [1.0, -2.0]);
        // μ (b² + R) summed over agents / K = 0.1 (1 + 4 + 1 + 2) / 2
        assert!((approx_local_updates(&inputs).unwrap() - 0.4).abs() < 1e-14);
        let mut more = inputs.clone();
        more.local_steps = 2;
        assert!(approx_local_updates(&more).unwrap() > 0.4);
    }

    #[test]
    fn msd_nonnegative_on_ring() {
        let a = build_metropolis(&Topology::ring(3).unwrap()).unwrap();
        let inputs = MsdInputs {
            hessians: vec![scalar(1.0), scalar(1.5), scalar(0.7)],
            noise: vec![scalar(0.5), scalar(0.2), scalar(0.9)],
            bias: DVector::from_column_slice(&[0.3, -0.1, -0.2]),
            mixing: MixingRule::Graph(a),
            activation: ActivationRule::Bernoulli(
                ActivationModel::new(vec![0.3, 0.6, 0.9]).unwrap(),
            ),
            mu: 0.05,
            local_steps: 3,
            mode: StepMode::Plain,
        };
        let r = msd_value(&inputs, ExpectationMode::exact()).unwrap();
        assert!(r.msd > 0.0 && r.relative_residual <= SOLVE_TOLERANCE);
        assert!(r.spectral_radius < 1.0);
    }
}
