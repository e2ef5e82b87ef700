//! Random agent activation and the time-varying matrices it induces.
//!
//! At the start of block `i` every agent draws whether it participates. The
//! pattern is frozen for the `T` local steps of the block. During steps
//! `t < T` the network does not mix (identity matrix); at `t = T` active agents
//! combine with their active neighbours and inactive agents keep their model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::CombinationMatrix;
use crate::rng::{self, Purpose};

#[derive(Debug, Error, PartialEq)]
pub enum ParticipationError {
    #[error("activation probability q[{index}] = {value} is outside [0, 1]")]
    ProbabilityRange { index: usize, value: f64 },
    #[error("local step t = {t} outside 1..={local_steps}")]
    LocalStepRange { t: usize, local_steps: usize },
    #[error("drift correction needs q > 0 for every agent; q[{0}] = 0")]
    ZeroProbability(usize),
    #[error("step size must be positive, got {0}")]
    StepSize(f64),
    #[error("subset size {size} must lie in 1..={agents}")]
    SubsetSize { size: usize, agents: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pattern enumeration needs {needed} patterns, above the budget of {budget}")]
    EnumerationBudget { needed: f64, budget: usize },
    #[error("uniform-random range [{low}, {high}] is not inside [0, 1]")]
    RandomRange { low: f64, high: f64 },
}

/// Per-agent activation probabilities `q_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationModel {
    q: Vec<f64>,
}

impl ActivationModel {
    pub fn new(q: Vec<f64>) -> Result<Self, ParticipationError> {
        for (index, &value) in q.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ParticipationError::ProbabilityRange { index, value });
            }
        }
        Ok(Self { q })
    }

    pub fn uniform(agents: usize, q: f64) -> Result<Self, ParticipationError> {
        Self::new(vec![q; agents])
    }

    pub fn full(agents: usize) -> Self {
        Self {
            q: vec![1.0; agents],
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.q
    }

    pub fn agent_count(&self) -> usize {
        self.q.len()
    }
}

/// Which agents participate in one block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    active: Vec<bool>,
}

impl ActivationPattern {
    pub fn new(active: Vec<bool>) -> Self {
        Self { active }
    }

    pub fn all(agents: usize) -> Self {
        Self {
            active: vec![true; agents],
        }
    }

    pub fn none(agents: usize) -> Self {
        Self {
            active: vec![false; agents],
        }
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// FNV-1a over the activation bits.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for &a in &self.active {
            h ^= a as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Independent Bernoulli(`q_k`) draws, one uniform per agent in agent order.
pub fn sample_pattern(model: &ActivationModel, rng: &mut impl Rng) -> ActivationPattern {
    let active = model.q.iter().map(|&q| rng.random::<f64>() < q).collect();
    ActivationPattern { active }
}

/// Activation stream for one block of one repetition.
pub fn pattern_stream(seed: u64, repetition: u64, block: u64) -> ChaCha8Rng {
    rng::stream(seed, Purpose::Activation, &[repetition, block])
}

/// How patterns are drawn each block.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationRule {
    /// Independent per-agent participation.
    Bernoulli(ActivationModel),
    /// A uniformly random subset of exactly `size` agents.
    UniformSubset { agents: usize, size: usize },
}

impl ActivationRule {
    pub fn uniform_subset(agents: usize, size: usize) -> Result<Self, ParticipationError> {
        if size == 0 || size > agents {
            return Err(ParticipationError::SubsetSize { size, agents });
        }
        Ok(Self::UniformSubset { agents, size })
    }

    pub fn agent_count(&self) -> usize {
        match self {
            ActivationRule::Bernoulli(m) => m.agent_count(),
            ActivationRule::UniformSubset { agents, .. } => *agents,
        }
    }

    /// Marginal participation probability of each agent.
    pub fn marginals(&self) -> Vec<f64> {
        match self {
            ActivationRule::Bernoulli(m) => m.q.clone(),
            ActivationRule::UniformSubset { agents, size } => {
                vec![*size as f64 / *agents as f64; *agents]
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ActivationPattern {
        match self {
            ActivationRule::Bernoulli(m) => sample_pattern(m, rng),
            ActivationRule::UniformSubset { agents, size } => {
                let chosen = rand::seq::index::sample(rng, *agents, *size);
                let mut active = vec![false; *agents];
                for k in chosen {
                    active[k] = true;
                }
                ActivationPattern { active }
            }
        }
    }

    /// Number of patterns with positive probability.
    pub fn support_size(&self) -> f64 {
        match self {
            ActivationRule::Bernoulli(m) => {
                m.q.iter()
                    .map(|&q| if q > 0.0 && q < 1.0 { 2.0 } else { 1.0 })
                    .product()
            }
            ActivationRule::UniformSubset { agents, size } => binomial(*agents, *size),
        }
    }

    /// Every pattern with positive probability and its probability.
    pub fn enumerate(
        &self,
        budget: usize,
    ) -> Result<Vec<(ActivationPattern, f64)>, ParticipationError> {
        let needed = self.support_size();
        if needed > budget as f64 {
            return Err(ParticipationError::EnumerationBudget { needed, budget });
        }
        match self {
            ActivationRule::Bernoulli(m) => {
                let mut out = vec![(Vec::with_capacity(m.q.len()), 1.0)];
                for &q in &m.q {
                    let mut next = Vec::with_capacity(out.len() * 2);
                    for (bits, p) in out {
                        if q < 1.0 {
                            let mut off: Vec<bool> = bits.clone();
                            off.push(false);
                            next.push((off, p * (1.0 - q)));
                        }
                        if q > 0.0 {
                            let mut on = bits;
                            on.push(true);
                            next.push((on, p * q));
                        }
                    }
                    out = next;
                }
                Ok(out
                    .into_iter()
                    .map(|(b, p)| (ActivationPattern::new(b), p))
                    .collect())
            }
            ActivationRule::UniformSubset { agents, size } => {
                let p = 1.0 / binomial(*agents, *size);
                let mut out = Vec::new();
                let mut idx: Vec<usize> = (0..*size).collect();
                loop {
                    let mut active = vec![false; *agents];
                    for &i in &idx {
                        active[i] = true;
                    }
                    out.push((ActivationPattern::new(active), p));
                    // next combination in lexicographic order
                    let mut i = *size;
                    loop {
                        if i == 0 {
                            return Ok(out);
                        }
                        i -= 1;
                        if idx[i] < agents - size + i {
                            break;
                        }
                    }
                    idx[i] += 1;
                    for j in i + 1..*size {
                        idx[j] = idx[j - 1] + 1;
                    }
                }
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// How the combine step mixes active agents.
#[derive(Debug, Clone, PartialEq)]
pub enum MixingRule {
    /// Underlying combination matrix restricted to active neighbourhoods.
    Graph(CombinationMatrix),
    /// Uniform average over the active set (federated averaging with client
    /// sampling); inactive agents keep their model.
    ActiveAverage { agents: usize },
}

impl MixingRule {
    pub fn agent_count(&self) -> usize {
        match self {
            MixingRule::Graph(a) => a.agent_count(),
            MixingRule::ActiveAverage { agents } => *agents,
        }
    }

    /// Combination matrix used at local step `t` of a block of `local_steps`.
    pub fn effective(
        &self,
        pattern: &ActivationPattern,
        t: usize,
        local_steps: usize,
    ) -> Result<CombinationMatrix, ParticipationError> {
        match self {
            MixingRule::Graph(a) => effective_matrix(a, pattern, t, local_steps),
            MixingRule::ActiveAverage { agents } => {
                check_step(t, local_steps)?;
                check_len(pattern.len(), *agents)?;
                if t != local_steps {
                    return Ok(CombinationMatrix::identity(*agents));
                }
                let n_active = pattern.active_count();
                let mut w = DMatrix::identity(*agents, *agents);
                if n_active > 0 {
                    let share = 1.0 / n_active as f64;
                    for k in (0..*agents).filter(|&k| pattern.is_active(k)) {
                        for l in (0..*agents).filter(|&l| pattern.is_active(l)) {
                            w[(l, k)] = share;
                        }
                    }
                }
                Ok(CombinationMatrix::new(w).expect("finite square weights"))
            }
        }
    }
}

fn check_step(t: usize, local_steps: usize) -> Result<(), ParticipationError> {
    if t == 0 || t > local_steps {
        return Err(ParticipationError::LocalStepRange { t, local_steps });
    }
    Ok(())
}

fn check_len(got: usize, expected: usize) -> Result<(), ParticipationError> {
    if got != expected {
        return Err(ParticipationError::Dimension(format!(
            "pattern has {got} agents, expected {expected}"
        )));
    }
    Ok(())
}

/// Time-varying combination matrix for local step `t` of a block.
///
/// Identity for `t < T`. At `t = T` an active agent keeps `a_{lk}` for active
/// neighbours `l` and folds the weights of inactive neighbours into its
/// self-weight; an inactive agent gets the unit column `e_k`.
pub fn effective_matrix(
    a: &CombinationMatrix,
    pattern: &ActivationPattern,
    t: usize,
    local_steps: usize,
) -> Result<CombinationMatrix, ParticipationError> {
    check_step(t, local_steps)?;
    let k_count = a.agent_count();
    check_len(pattern.len(), k_count)?;
    if t != local_steps {
        return Ok(CombinationMatrix::identity(k_count));
    }
    let mut w = DMatrix::identity(k_count, k_count);
    for k in (0..k_count).filter(|&k| pattern.is_active(k)) {
        let mut self_weight = a.weight(k, k);
        for l in (0..k_count).filter(|&l| l != k) {
            let alk = a.weight(l, k);
            if alk == 0.0 {
                continue;
            }
            if pattern.is_active(l) {
                w[(l, k)] = alk;
            } else {
                self_weight += alk;
            }
        }
        w[(k, k)] = self_weight;
    }
    Ok(CombinationMatrix::new(w).expect("finite square weights"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// Active agents use `μ`.
    #[default]
    Plain,
    /// Active agents use `μ / q_k`, which removes the participation drift.
    DriftCorrected,
}

/// Diagonal of the per-block step-size matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeMatrix {
    diag: Vec<f64>,
}

impl StepSizeMatrix {
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn get(&self, k: usize) -> f64 {
        self.diag[k]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag))
    }
}

/// Step size an agent uses while active.
pub fn active_step_sizes(
    mu: f64,
    mode: StepMode,
    q: &[f64],
) -> Result<Vec<f64>, ParticipationError> {
    if !(mu > 0.0) {
        return Err(ParticipationError::StepSize(mu));
    }
    match mode {
        StepMode::Plain => Ok(vec![mu; q.len()]),
        StepMode::DriftCorrected => q
            .iter()
            .enumerate()
            .map(|(k, &qk)| {
                if qk > 0.0 {
                    Ok(mu / qk)
                } else {
                    Err(ParticipationError::ZeroProbability(k))
                }
            })
            .collect(),
    }
}

pub fn step_size_matrix(
    pattern: &ActivationPattern,
    mu: f64,
    mode: StepMode,
    q: &[f64],
) -> Result<StepSizeMatrix, ParticipationError> {
    check_len(pattern.len(), q.len())?;
    let steps = active_step_sizes(mu, mode, q)?;
    let diag = steps
        .iter()
        .enumerate()
        .map(|(k, &s)| if pattern.is_active(k) { s } else { 0.0 })
        .collect();
    Ok(StepSizeMatrix { diag })
}

/// `E[A_{iT}]`: off-diagonal `q_l q_k a_{lk}`, diagonal restoring unit columns.
pub fn expected_matrix(
    a: &CombinationMatrix,
    model: &ActivationModel,
) -> Result<CombinationMatrix, ParticipationError> {
    let k_count = a.agent_count();
    check_len(model.agent_count(), k_count)?;
    let q = model.probabilities();
    let mut w = DMatrix::zeros(k_count, k_count);
    for k in 0..k_count {
        let mut diag = a.weight(k, k);
        for l in (0..k_count).filter(|&l| l != k) {
            let alk = a.weight(l, k);
            let kept = q[l] * q[k] * alk;
            w[(l, k)] = kept;
            diag += alk - kept;
        }
        w[(k, k)] = diag;
    }
    Ok(CombinationMatrix::new(w).expect("finite square weights"))
}

/// `E[A_{iT} M_i]` together with `M̄ = E[M_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedStepProduct {
    pub product: DMatrix<f64>,
    pub mean_step: DVector<f64>,
}

/// `E[A_{iT} M_i] = (Ā − I) diag(s) + diag(q ∘ s)` with `s_k` the active step
/// size; in plain mode this is `μ(Ā − I) + M̄`.
pub fn expected_step_product(
    a: &CombinationMatrix,
    model: &ActivationModel,
    mu: f64,
    mode: StepMode,
) -> Result<ExpectedStepProduct, ParticipationError> {
    let abar = expected_matrix(a, model)?;
    let q = model.probabilities();
    let s = active_step_sizes(mu, mode, q)?;
    let k_count = a.agent_count();
    let mut product = abar.into_inner() - DMatrix::identity(k_count, k_count);
    for k in 0..k_count {
        for l in 0..k_count {
            product[(l, k)] *= s[k];
        }
        product[(k, k)] += q[k] * s[k];
    }
    let mean_step = DVector::from_fn(k_count, |k, _| q[k] * s[k]);
    Ok(ExpectedStepProduct { product, mean_step })
}

/// Activation probabilities as written in a configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ActivationSpec {
    /// One probability for every agent.
    Uniform {
        q: f64,
    },
    Explicit {
        q: Vec<f64>,
    },
    /// `q_k` drawn uniformly from `[low, high]`.
    UniformRandom {
        low: f64,
        high: f64,
        seed: u64,
    },
}

impl ActivationSpec {
    pub fn build(&self, agents: usize) -> Result<ActivationModel, ParticipationError> {
        match self {
            ActivationSpec::Uniform { q } => ActivationModel::uniform(agents, *q),
            ActivationSpec::Explicit { q } => {
                check_len(q.len(), agents)?;
                ActivationModel::new(q.clone())
            }
            ActivationSpec::UniformRandom { low, high, seed } => {
                if !(0.0 <= *low && low <= high && *high <= 1.0) {
                    return Err(ParticipationError::RandomRange {
                        low: *low,
                        high: *high,
                    });
                }
                let mut rng = rng::stream(*seed, Purpose::Probabilities, &[agents as u64]);
                ActivationModel::new(
                    (0..agents)
                        .map(|_| rng.random_range(*low..=*high))
                        .collect(),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_metropolis, Topology};
    use rand::SeedableRng;

    fn ring3() -> CombinationMatrix {
        build_metropolis(&Topology::ring(3).unwrap()).unwrap()
    }

    fn path2() -> CombinationMatrix {
        build_metropolis(&Topology::path(2).unwrap()).unwrap()
    }

    #[test]
    fn certain_and_impossible_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ones = ActivationModel::uniform(3, 1.0).unwrap();
        let zeros = ActivationModel::uniform(2, 0.0).unwrap();
        for _ in 0..100 {
            assert_eq!(sample_pattern(&ones, &mut rng), ActivationPattern::all(3));
            assert_eq!(sample_pattern(&zeros, &mut rng), ActivationPattern::none(2));
        }
    }

    #[test]
    fn half_probability_rate() {
        let model = ActivationModel::uniform(4, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let p = sample_pattern(&model, &mut rng);
            for (k, c) in counts.iter_mut().enumerate() {
                *c += p.is_active(k) as usize;
            }
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn pattern_stream_replays() {
        let model = ActivationModel::uniform(6, 0.4).unwrap();
        let a = sample_pattern(&model, &mut pattern_stream(9, 1, 77));
        let b = sample_pattern(&model, &mut pattern_stream(9, 1, 77));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(matches!(
            ActivationModel::new(vec![0.5, 1.2]),
            Err(ParticipationError::ProbabilityRange { index: 1, .. })
        ));
    }

    #[test]
    fn effective_all_active_is_a() {
        let a = ring3();
        let e = effective_matrix(&a, &ActivationPattern::all(3), 4, 4).unwrap();
        assert_eq!(e, a);
    }

    #[test]
    fn effective_none_active_is_identity() {
        let e = effective_matrix(&ring3(), &ActivationPattern::none(3), 2, 2).unwrap();
        assert_eq!(e, CombinationMatrix::identity(3));
    }

    #[test]
    fn effective_inside_block_is_identity() {
        let e = effective_matrix(&ring3(), &ActivationPattern::all(3), 1, 3).unwrap();
        assert_eq!(e, CombinationMatrix::identity(3));
    }

    #[test]
    fn effective_with_one_inactive_agent() {
        let pattern = ActivationPattern::new(vec![true, true, false]);
        let e = effective_matrix(&ring3(), &pattern, 1, 1).unwrap();
        let expected = [
            2.0 / 3.0,
            1.0 / 3.0,
            0.0,
            1.0 / 3.0,
            2.0 / 3.0,
            0.0,
            0.0,
            0.0,
            1.0,
        ];
        for (i, v) in expected.iter().enumerate() {
            assert!((e.weights()[(i / 3, i % 3)] - v).abs() < 1e-15);
        }
    }

    #[test]
    fn effective_rejects_bad_step() {
        let err = effective_matrix(&ring3(), &ActivationPattern::all(3), 0, 2).unwrap_err();
        assert_eq!(
            err,
            ParticipationError::LocalStepRange {
                t: 0,
                local_steps: 2
            }
        );
        assert!(effective_matrix(&ring3(), &ActivationPattern::all(3), 3, 2).is_err());
    }

    #[test]
    fn step_sizes_by_mode() {
        let all = ActivationPattern::all(3);
        let plain = step_size_matrix(&all, 0.01, StepMode::Plain, &[0.3, 0.5, 1.0]).unwrap();
        assert_eq!(plain.diag(), &[0.01, 0.01, 0.01]);
        let none = step_size_matrix(
            &ActivationPattern::none(3),
            0.01,
            StepMode::Plain,
            &[1.0; 3],
        )
        .unwrap();
        assert_eq!(none.diag(), &[0.0; 3]);
        let p = ActivationPattern::new(vec![true, false]);
        let dc = step_size_matrix(&p, 0.01, StepMode::DriftCorrected, &[0.5, 0.9]).unwrap();
        assert!((dc.get(0) - 0.02).abs() < 1e-15);
        assert_eq!(dc.get(1), 0.0);
        let err = step_size_matrix(&p, 0.01, StepMode::DriftCorrected, &[0.5, 0.0]).unwrap_err();
        assert_eq!(err, ParticipationError::ZeroProbability(1));
    }

    #[test]
    fn expected_matrix_limits() {
        let a = ring3();
        assert_eq!(expected_matrix(&a, &ActivationModel::full(3)).unwrap(), a);
        let none = expected_matrix(&a, &ActivationModel::uniform(3, 0.0).unwrap()).unwrap();
        assert!((none.weights() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn expected_matrix_two_agents() {
        let abar = expected_matrix(&path2(), &ActivationModel::uniform(2, 0.5).unwrap()).unwrap();
        assert!((abar.weight(0, 1) - 0.125).abs() < 1e-15);
        assert!((abar.weight(0, 0) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn expected_step_product_limits() {
        let a = ring3();
        let full =
            expected_step_product(&a, &ActivationModel::full(3), 0.01, StepMode::Plain).unwrap();
        assert!((full.product.clone() - a.weights() * 0.01).amax() < 1e-16);
        let none = expected_step_product(
            &a,
            &ActivationModel::uniform(3, 0.0).unwrap(),
            0.01,
            StepMode::Plain,
        )
        .unwrap();
        assert!(none.product.amax() < 1e-17);
        assert!(none.mean_step.amax() == 0.0);
    }

    #[test]
    fn expected_step_product_monte_carlo_two_agents() {
        let a = path2();
        let model = ActivationModel::uniform(2, 0.5).unwrap();
        let exact = expected_step_product(&a, &model, 0.01, StepMode::Plain).unwrap();
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = DMatrix::zeros(2, 2);
        let mut sumsq = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let p = sample_pattern(&model, &mut rng);
            let e = effective_matrix(&a, &p, 1, 1).unwrap();
            let m = step_size_matrix(&p, 0.01, StepMode::Plain, model.probabilities()).unwrap();
            let prod = e.weights() * m.to_matrix();
            sumsq += prod.component_mul(&prod);
            sum += prod;
        }
        let mean = &sum / n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let var = sumsq[(i, j)] / n as f64 - mean[(i, j)].powi(2);
                let se = (var / n as f64).sqrt();
                assert!((mean[(i, j)] - exact.product[(i, j)]).abs() <= 3.0 * se + 1e-15);
            }
        }
    }

    #[test]
    fn drift_corrected_product_matches_closed_form() {
        let a = ring3();
        let model = ActivationModel::new(vec![0.3, 0.6, 0.9]).unwrap();
        let mu = 0.02;
        let got = expected_step_product(&a, &model, mu, StepMode::DriftCorrected).unwrap();
        // μ²(Ā − I) M̄⁻¹ + μ I, with M̄ = diag(μ q)
        let abar = expected_matrix(&a, &model).unwrap().into_inner();
        let mbar_inv = DMatrix::from_diagonal(&DVector::from_iterator(
            3,
            model.probabilities().iter().map(|q| 1.0 / (mu * q)),
        ));
        let want =
            (abar - DMatrix::identity(3, 3)) * mbar_inv * mu * mu + DMatrix::identity(3, 3) * mu;
        assert!((got.product - want).amax() < 1e-15);
    }

    #[test]
    fn subset_rule_enumerates_all_combinations() {
        let rule = ActivationRule::uniform_subset(5, 2).unwrap();
        let pats = rule.enumerate(1000).unwrap();
        assert_eq!(pats.len(), 10);
        assert!(pats.iter().all(|(p, _)| p.active_count() == 2));
        assert!((pats.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(rule.sample(&mut rng).active_count(), 2);
        assert!(ActivationRule::uniform_subset(5, 0).is_err());
    }

    #[test]
    fn bernoulli_enumeration_skips_impossible() {
        let rule = ActivationRule::Bernoulli(ActivationModel::new(vec![1.0, 0.5, 0.0]).unwrap());
        let pats = rule.enumerate(16).unwrap();
        assert_eq!(pats.len(), 2);
        let big = ActivationRule::Bernoulli(ActivationModel::uniform(20, 0.5).unwrap());
        assert!(matches!(
            big.enumerate(4096),
            Err(ParticipationError::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn active_average_matches_subset_weights() {
        let rule = MixingRule::ActiveAverage { agents: 4 };
        let p = ActivationPattern::new(vec![true, false, true, false]);
        let e = rule.effective(&p, 2, 2).unwrap();
        assert_eq!(e.weight(0, 2), 0.5);
        assert_eq!(e.weight(0, 0), 0.5);
        assert_eq!(e.weight(1, 1), 1.0);
        assert_eq!(e.weight(1, 0), 0.0);
    }

    #[test]
    fn uniform_random_spec_is_seeded() {
        let spec = ActivationSpec::UniformRandom {
            low: 0.5,
            high: 1.0,
            seed: 4,
        };
        let a = spec.build(8).unwrap();
        assert_eq!(a, spec.build(8).unwrap());
        assert!(a.probabilities().iter().all(|&q| (0.5..=1.0).contains(&q)));
        assert!(ActivationSpec::Explicit { q: vec![0.5] }.build(2).is_err());
    }
}
