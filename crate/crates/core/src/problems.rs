//! Per-agent ridge regression with exact oracles.
//!
//! Agent `k` holds samples `(u_{k,n}, d_k(n))` and the local risk
//!
//! ```text
//! J_k(w) = (1/N_k) Σ_n |d_k(n) − u_{k,n}ᵀ w|² + ρ‖w‖²
//! ```
//!
//! which is exactly quadratic: `∇J_k(w) = H_k w − c_k` with
//! `H_k = (2/N_k) Σ u uᵀ + 2ρI` and `c_k = (2/N_k) Σ u d`. The per-sample loss
//! `Q_k(w; n) = |d_k(n) − u_{k,n}ᵀ w|² + ρ‖w‖²` gives the stochastic gradient.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

use crate::rng::{self, Purpose};

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("agent index {index} out of range (K = {agents})")]
    AgentIndex { index: usize, agents: usize },
    #[error("sample index {index} out of range for agent {agent} (N = {samples})")]
    SampleIndex {
        agent: usize,
        index: usize,
        samples: usize,
    },
    #[error("input covariance is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("invalid generation parameters: {0}")]
    Spec(String),
    #[error("every activation probability is zero; the weighted risk is degenerate")]
    DegenerateWeights,
    #[error("weighted Hessian is singular")]
    Singular,
    #[error("optimum stationarity residual {0:e} exceeds 1e-10")]
    Stationarity(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dataset parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Generation parameters for the synthetic family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSpec {
    pub agents: usize,
    pub dim: usize,
    pub samples: usize,
    pub ridge: f64,
    /// Input covariance `R_u`; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_covariance: Option<Vec<Vec<f64>>>,
    /// Each coordinate of an agent's input mean is uniform in this range.
    pub mean_range: [f64; 2],
    /// Each agent's observation-noise variance is uniform in this range.
    pub noise_variance_range: [f64; 2],
    /// Generative model `w*`.
    pub w_star: Vec<f64>,
    pub seed: u64,
}

/// Raw per-agent samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    /// `inputs[k]` is `N_k × M`, one sample per row.
    pub inputs: Vec<DMatrix<f64>>,
    pub outputs: Vec<DVector<f64>>,
    /// Observation-noise variances used at generation time, when known.
    pub noise_variances: Option<Vec<f64>>,
}

impl RegressionDataset {
    pub fn new(
        inputs: Vec<DMatrix<f64>>,
        outputs: Vec<DVector<f64>>,
    ) -> Result<Self, ProblemError> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(ProblemError::Dimension(
                "need one output vector per agent and at least one agent".into(),
            ));
        }
        let dim = inputs[0].ncols();
        for (k, (u, d)) in inputs.iter().zip(&outputs).enumerate() {
            if u.nrows() == 0 {
                return Err(ProblemError::Spec(format!("agent {k} has no samples")));
            }
            if u.ncols() != dim || u.nrows() != d.len() {
                return Err(ProblemError::Dimension(format!(
                    "agent {k} inputs/outputs disagree in shape"
                )));
            }
        }
        Ok(Self {
            inputs,
            outputs,
            noise_variances: None,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].ncols()
    }

    /// Columnar text: `agent,sample,u0..u{M-1},d`.
    pub fn to_columnar(&self) -> String {
        let m = self.dim();
        let mut out = String::from("agent,sample");
        for j in 0..m {
            let _ = write!(out, ",u{j}");
        }
        out.push_str(",d\n");
        for (k, (u, d)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            for n in 0..u.nrows() {
                let _ = write!(out, "{k},{n}");
                for j in 0..m {
                    let _ = write!(out, ",{:?}", u[(n, j)]);
                }
                let _ = writeln!(out, ",{:?}", d[n]);
            }
        }
        out
    }

    pub fn from_columnar(text: &str) -> Result<Self, ProblemError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(ProblemError::Parse {
            line: 1,
            message: "empty document".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 4
            || cols[0] != "agent"
            || cols[1] != "sample"
            || cols[cols.len() - 1] != "d"
        {
            return Err(ProblemError::Parse {
                line: 1,
                message: "expected header agent,sample,u0..,d".into(),
            });
        }
        let m = cols.len() - 3;
        let mut rows: Vec<Vec<(usize, Vec<f64>, f64)>> = Vec::new();
        for (i, line) in lines {
            let err = |message: String| ProblemError::Parse {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != m + 3 {
                return Err(err(format!(
                    "expected {} fields, found {}",
                    m + 3,
                    fields.len()
                )));
            }
            let agent: usize = fields[0].parse().map_err(|e| err(format!("agent: {e}")))?;
            let sample: usize = fields[1].parse().map_err(|e| err(format!("sample: {e}")))?;
            let mut u = Vec::with_capacity(m);
            for f in &fields[2..2 + m] {
                u.push(f.parse::<f64>().map_err(|e| err(format!("input: {e}")))?);
            }
            let d: f64 = fields[m + 2]
                .parse()
                .map_err(|e| err(format!("output: {e}")))?;
            if agent >= rows.len() {
                rows.resize_with(agent + 1, Vec::new);
            }
            rows[agent].push((sample, u, d));
        }
        let mut inputs = Vec::with_capacity(rows.len());
        let mut outputs = Vec::with_capacity(rows.len());
        for (k, mut agent_rows) in rows.into_iter().enumerate() {
            agent_rows.sort_by_key(|r| r.0);
            if agent_rows.iter().enumerate().any(|(n, r)| r.0 != n) {
                return Err(ProblemError::Spec(format!(
                    "agent {k} sample ids are not 0..N-1"
                )));
            }
            let n = agent_rows.len();
            inputs.push(DMatrix::from_fn(n, m, |r, c| agent_rows[r].1[c]));
            outputs.push(DVector::from_fn(n, |r, _| agent_rows[r].2));
        }
        Self::new(inputs, outputs)
    }
}

/// The regularised problem with cached Hessians and linear terms.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    dataset: RegressionDataset,
    ridge: f64,
    hessians: Vec<DMatrix<f64>>,
    linear: Vec<DVector<f64>>,
    output_power: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(dataset: RegressionDataset, ridge: f64) -> Result<Self, ProblemError> {
        if !(ridge >= 0.0) {
            return Err(ProblemError::Spec(format!(
                "ridge must be nonnegative, got {ridge}"
            )));
        }
        let m = dataset.dim();
        let mut hessians = Vec::with_capacity(dataset.agent_count());
        let mut linear = Vec::with_capacity(dataset.agent_count());
        let mut output_power = Vec::with_capacity(dataset.agent_count());
        for (u, d) in dataset.inputs.iter().zip(&dataset.outputs) {
            let n = u.nrows() as f64;
            hessians.push(u.transpose() * u * (2.0 / n) + DMatrix::identity(m, m) * (2.0 * ridge));
            linear.push(u.transpose() * d * (2.0 / n));
            output_power.push(d.norm_squared() / n);
        }
        Ok(Self {
            dataset,
            ridge,
            hessians,
            linear,
            output_power,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.dataset.agent_count()
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dataset(&self) -> &RegressionDataset {
        &self.dataset
    }

    pub fn samples(&self, k: usize) -> usize {
        self.dataset.inputs[k].nrows()
    }

    fn check_agent(&self, k: usize) -> Result<(), ProblemError> {
        if k >= self.agent_count() {
            return Err(ProblemError::AgentIndex {
                index: k,
                agents: self.agent_count(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, w: &DVector<f64>) -> Result<(), ProblemError> {
        if w.len() != self.dim() {
            return Err(ProblemError::Dimension(format!(
                "model has {} entries, expected {}",
                w.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn risk(&self, k: usize, w: &DVector<f64>) -> Result<f64, ProblemError> {
        self.check_agent(k)?;
        self.check_dim(w)?;
        // J = wᵀ(H/2)w − cᵀw + mean(d²)
        Ok(0.5 * w.dot(&(&self.hessians[k] * w)) - self.linear[k].dot(w) + self.output_power[k])
    }

    pub fn hessian(&self, k: usize) -> Result<&DMatrix<f64>, ProblemError> {
        self.check_agent(k)?;
        Ok(&self.hessians[k])
    }

    pub fn local_gradient(&self, k: usize, w: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        self.check_agent(k)?;
        self.check_dim(w)?;
        Ok(&self.hessians[k] * w - &self.linear[k])
    }

    /// `∇J_k(w)` written into `out`; no bounds checks beyond slicing.
    pub(crate) fn local_gradient_into(&self, k: usize, w: &[f64], out: &mut [f64]) {
        let h = &self.hessians[k];
        let c = &self.linear[k];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = -c[i];
            for (j, wj) in w.iter().enumerate() {
                acc += h[(i, j)] * wj;
            }
            *o = acc;
        }
    }

    pub fn stochastic_gradient(
        &self,
        k: usize,
        w: &DVector<f64>,
        n: usize,
    ) -> Result<DVector<f64>, ProblemError> {
        self.check_agent(k)?;
        self.check_dim(w)?;
        if n >= self.samples(k) {
            return Err(ProblemError::SampleIndex {
                agent: k,
                index: n,
                samples: self.samples(k),
            });
        }
        let mut out = DVector::zeros(self.dim());
        self.stochastic_gradient_into(k, w.as_slice(), n, out.as_mut_slice());
        Ok(out)
    }

    /// `∇Q_k(w; n) = −2u(d − uᵀw) + 2ρw` written into `out`.
    pub fn stochastic_gradient_into(&self, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
        let u = &self.dataset.inputs[k];
        let d = self.dataset.outputs[k][n];
        let mut residual = d;
        for (j, wj) in w.iter().enumerate() {
            residual -= u[(n, j)] * wj;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o = -2.0 * u[(n, j)] * residual + 2.0 * self.ridge * w[j];
        }
    }

    /// Gradient noise `∇Q_k(w; n) − ∇J_k(w)`.
    pub fn gradient_noise(
        &self,
        k: usize,
        w: &DVector<f64>,
        n: usize,
    ) -> Result<DVector<f64>, ProblemError> {
        Ok(self.stochastic_gradient(k, w, n)? - self.local_gradient(k, w)?)
    }

    pub fn local_minimizer(&self, k: usize) -> Result<DVector<f64>, ProblemError> {
        self.check_agent(k)?;
        self.hessians[k]
            .clone()
            .lu()
            .solve(&self.linear[k])
            .ok_or(ProblemError::Singular)
    }

    /// Minimiser of `(1/K) Σ q_k J_k(w)`.
    pub fn drifted_optimum(&self, q: &[f64]) -> Result<DVector<f64>, ProblemError> {
        if q.len() != self.agent_count() {
            return Err(ProblemError::Dimension(format!(
                "{} weights for {} agents",
                q.len(),
                self.agent_count()
            )));
        }
        if q.iter().all(|&v| v == 0.0) {
            return Err(ProblemError::DegenerateWeights);
        }
        let m = self.dim();
        let mut h = DMatrix::zeros(m, m);
        let mut c = DVector::zeros(m);
        for (k, &qk) in q.iter().enumerate() {
            h += &self.hessians[k] * qk;
            c += &self.linear[k] * qk;
        }
        let w = h.clone().lu().solve(&c).ok_or(ProblemError::Singular)?;
        let residual = self.weighted_stationarity(q, &w)?;
        if residual > 1e-10 {
            return Err(ProblemError::Stationarity(residual));
        }
        Ok(w)
    }

    /// Minimiser of the unweighted average risk.
    pub fn optimum(&self) -> Result<DVector<f64>, ProblemError> {
        self.drifted_optimum(&vec![1.0; self.agent_count()])
    }

    /// `‖(1/K) Σ q_k ∇J_k(w)‖_∞`.
    pub fn weighted_stationarity(&self, q: &[f64], w: &DVector<f64>) -> Result<f64, ProblemError> {
        let mut g = DVector::zeros(self.dim());
        for (k, &qk) in q.iter().enumerate() {
            g += self.local_gradient(k, w)? * qk;
        }
        Ok((g / self.agent_count() as f64).amax())
    }

    /// `b = −col{∇J_k(w_ref)}`.
    pub fn bias_vector(&self, w_ref: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        let m = self.dim();
        let mut b = DVector::zeros(self.agent_count() * m);
        for k in 0..self.agent_count() {
            let g = self.local_gradient(k, w_ref)?;
            b.rows_mut(k * m, m).copy_from(&(-g));
        }
        Ok(b)
    }

    /// Exact covariance of the gradient noise under uniform sampling.
    pub fn noise_covariance(
        &self,
        k: usize,
        w_ref: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ProblemError> {
        let full = self.local_gradient(k, w_ref)?;
        let m = self.dim();
        let n_k = self.samples(k);
        let mut r = DMatrix::zeros(m, m);
        let mut g = vec![0.0; m];
        for n in 0..n_k {
            self.stochastic_gradient_into(k, w_ref.as_slice(), n, &mut g);
            let s = DVector::from_iterator(m, g.iter().zip(full.iter()).map(|(a, b)| a - b));
            r += &s * s.transpose();
        }
        r /= n_k as f64;
        Ok((&r + r.transpose()) * 0.5)
    }

    /// Exact `(E‖s‖², E‖s‖⁴)` of the gradient noise at `w_ref`.
    pub fn noise_moments(
        &self,
        k: usize,
        w_ref: &DVector<f64>,
    ) -> Result<(f64, f64), ProblemError> {
        let full = self.local_gradient(k, w_ref)?;
        let m = self.dim();
        let n_k = self.samples(k);
        let mut g = vec![0.0; m];
        let (mut second, mut fourth) = (0.0, 0.0);
        for n in 0..n_k {
            self.stochastic_gradient_into(k, w_ref.as_slice(), n, &mut g);
            let sq: f64 = g
                .iter()
                .zip(full.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            second += sq;
            fourth += sq * sq;
        }
        Ok((second / n_k as f64, fourth / n_k as f64))
    }

    /// Smallest Hessian eigenvalue over agents (strong-convexity constant).
    pub fn strong_convexity(&self) -> f64 {
        self.hessians
            .iter()
            .map(|h| h.clone().symmetric_eigenvalues().min())
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest Hessian eigenvalue over agents (gradient Lipschitz constant).
    pub fn lipschitz(&self) -> f64 {
        self.hessians
            .iter()
            .map(|h| h.clone().symmetric_eigenvalues().max())
            .fold(0.0, f64::max)
    }
}

fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, ProblemError> {
    let sym = (cov + cov.transpose()) * 0.5;
    if (&sym - cov).amax() > 1e-12 {
        return Err(ProblemError::Spec(
            "input covariance is not symmetric".into(),
        ));
    }
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-12 {
        return Err(ProblemError::NotPsd(min));
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Draws a dataset from `spec`: Gaussian inputs with covariance `R_u` and a
/// per-agent mean, outputs `uᵀw* + v` with per-agent noise variance.
pub fn generate_synthetic(spec: &GenerationSpec) -> Result<QuadraticProblem, ProblemError> {
    let GenerationSpec {
        agents,
        dim,
        samples,
        ridge,
        ..
    } = *spec;
    if agents == 0 || dim == 0 || samples == 0 {
        return Err(ProblemError::Spec(
            "agents, dim and samples must be positive".into(),
        ));
    }
    if spec.w_star.len() != dim {
        return Err(ProblemError::Spec(format!(
            "w_star has {} entries, expected {dim}",
            spec.w_star.len()
        )));
    }
    let [mlo, mhi] = spec.mean_range;
    let [vlo, vhi] = spec.noise_variance_range;
    if !(mlo <= mhi) || !(0.0 <= vlo && vlo <= vhi) {
        return Err(ProblemError::Spec(
            "mean_range and noise_variance_range must be ordered, variances nonnegative".into(),
        ));
    }
    let cov = match &spec.input_covariance {
        None => DMatrix::identity(dim, dim),
        Some(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(ProblemError::Spec(format!(
                    "input_covariance must be {dim}x{dim}"
                )));
            }
            DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
        }
    };
    let root = psd_sqrt(&cov)?;
    let w_star = DVector::from_column_slice(&spec.w_star);
    let mut inputs = Vec::with_capacity(agents);
    let mut outputs = Vec::with_capacity(agents);
    let mut variances = Vec::with_capacity(agents);
    for k in 0..agents {
        let mut rng = rng::stream(spec.seed, Purpose::Generation, &[k as u64]);
        let mean = DVector::from_fn(dim, |_, _| uniform(&mut rng, mlo, mhi));
        let variance = uniform(&mut rng, vlo, vhi);
        let mut u = DMatrix::zeros(samples, dim);
        let mut d = DVector::zeros(samples);
        for n in 0..samples {
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let x = &mean + &root * z;
            let v: f64 = StandardNormal.sample(&mut rng);
            d[n] = x.dot(&w_star) + variance.sqrt() * v;
            u.row_mut(n).copy_from(&x.transpose());
        }
        inputs.push(u);
        outputs.push(d);
        variances.push(variance);
    }
    let mut dataset = RegressionDataset::new(inputs, outputs)?;
    dataset.noise_variances = Some(variances);
    QuadraticProblem::new(dataset, ridge)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}
