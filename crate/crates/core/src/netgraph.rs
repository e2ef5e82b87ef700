//! Network topologies and static combination matrices.
//!
//! A [`Topology`] is an undirected graph in which every agent is its own
//! neighbour. A [`CombinationMatrix`] holds the mixing weights `a_{lk}`
//! (column `k` is what agent `k` receives). Valid matrices are symmetric,
//! doubly stochastic, supported on the graph and primitive.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

use crate::rng::{self, Purpose};

/// Absolute tolerance for symmetry and stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("topology needs at least one agent")]
    Empty,
    #[error("edge ({0}, {1}) references an agent outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("topology is disconnected: agent {from} cannot reach agent {to}")]
    Disconnected { from: usize, to: usize },
    #[error("random-geometric radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("no connected random-geometric graph with radius {radius} after {attempts} draws")]
    GeometricExhausted { radius: f64, attempts: usize },
    #[error("matrix is {rows}x{cols}, expected {expected}x{expected}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("matrix has a non-finite entry")]
    NonFinite,
    #[error(
        "Perron iteration did not converge (residual {residual:e} after {iterations} iterations)"
    )]
    PerronNotConverged { residual: f64, iterations: usize },
}

/// Undirected graph over `K` agents; the diagonal is always set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    agents: usize,
    adjacency: Vec<bool>,
}

impl Topology {
    pub fn from_edges(agents: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if agents == 0 {
            return Err(GraphError::Empty);
        }
        let mut adjacency = vec![false; agents * agents];
        for k in 0..agents {
            adjacency[k * agents + k] = true;
        }
        for &(l, k) in edges {
            if l >= agents || k >= agents {
                return Err(GraphError::EdgeOutOfRange(l, k, agents));
            }
            adjacency[l * agents + k] = true;
            adjacency[k * agents + l] = true;
        }
        Ok(Self { agents, adjacency })
    }

    pub fn ring(agents: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..agents).map(|k| (k, (k + 1) % agents)).collect();
        Self::from_edges(agents, &edges)
    }

    pub fn path(agents: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..agents).map(|k| (k - 1, k)).collect();
        Self::from_edges(agents, &edges)
    }

    pub fn complete(agents: usize) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for l in 0..agents {
            for k in l + 1..agents {
                edges.push((l, k));
            }
        }
        Self::from_edges(agents, &edges)
    }

    /// Agents dropped uniformly in the unit square, linked when closer than
    /// `radius`. Positions are redrawn (deterministically from `seed`) until
    /// the graph is connected.
    pub fn random_geometric(agents: usize, radius: f64, seed: u64) -> Result<Self, GraphError> {
        const ATTEMPTS: usize = 1000;
        if !(radius > 0.0) {
            return Err(GraphError::BadRadius(radius));
        }
        let mut rng = rng::stream(seed, Purpose::Topology, &[agents as u64]);
        for _ in 0..ATTEMPTS {
            let pts: Vec<(f64, f64)> = (0..agents).map(|_| (rng.random(), rng.random())).collect();
            let mut edges = Vec::new();
            for l in 0..agents {
                for k in l + 1..agents {
                    let (dx, dy) = (pts[l].0 - pts[k].0, pts[l].1 - pts[k].1);
                    if (dx * dx + dy * dy).sqrt() < radius {
                        edges.push((l, k));
                    }
                }
            }
            let topo = Self::from_edges(agents, &edges)?;
            if topo.is_connected() {
                return Ok(topo);
            }
        }
        Err(GraphError::GeometricExhausted {
            radius,
            attempts: ATTEMPTS,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.agents
    }

    pub fn is_neighbor(&self, l: usize, k: usize) -> bool {
        self.adjacency[l * self.agents + k]
    }

    /// Neighbour count excluding the agent itself.
    pub fn degree(&self, k: usize) -> usize {
        (0..self.agents)
            .filter(|&l| l != k && self.is_neighbor(l, k))
            .count()
    }

    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.agents).filter(move |&l| self.is_neighbor(l, k))
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.agents {
            for k in l + 1..self.agents {
                if self.is_neighbor(l, k) {
                    out.push((l, k));
                }
            }
        }
        out
    }

    /// First agent not reachable from agent 0, if any.
    pub fn unreachable_pair(&self) -> Option<(usize, usize)> {
        let mut seen = vec![false; self.agents];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for l in self.neighbors(k) {
                if !seen[l] {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
        seen.iter().position(|s| !s).map(|to| (0, to))
    }

    pub fn is_connected(&self) -> bool {
        self.unreachable_pair().is_none()
    }
}

/// How a topology is described in a configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologySpec {
    Ring {
        agents: usize,
    },
    Path {
        agents: usize,
    },
    Complete {
        agents: usize,
    },
    RandomGeometric {
        agents: usize,
        radius: f64,
        seed: u64,
    },
    Edges {
        agents: usize,
        edges: Vec<[usize; 2]>,
    },
}

impl TopologySpec {
    pub fn agent_count(&self) -> usize {
        match *self {
            TopologySpec::Ring { agents }
            | TopologySpec::Path { agents }
            | TopologySpec::Complete { agents }
            | TopologySpec::RandomGeometric { agents, .. }
            | TopologySpec::Edges { agents, .. } => agents,
        }
    }

    pub fn build(&self) -> Result<Topology, GraphError> {
        match self {
            TopologySpec::Ring { agents } => Topology::ring(*agents),
            TopologySpec::Path { agents } => Topology::path(*agents),
            TopologySpec::Complete { agents } => Topology::complete(*agents),
            TopologySpec::RandomGeometric {
                agents,
                radius,
                seed,
            } => Topology::random_geometric(*agents, *radius, *seed),
            TopologySpec::Edges { agents, edges } => {
                let pairs: Vec<_> = edges.iter().map(|e| (e[0], e[1])).collect();
                Topology::from_edges(*agents, &pairs)
            }
        }
    }
}

/// Mixing weights `a_{lk}`; entry `(l, k)` is the weight agent `k` puts on `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix(DMatrix<f64>);

impl CombinationMatrix {
    /// Wraps a square matrix of finite weights. Structural properties are
    /// checked by [`validate_combination`], not here.
    pub fn new(weights: DMatrix<f64>) -> Result<Self, GraphError> {
        if weights.nrows() != weights.ncols() || weights.nrows() == 0 {
            return Err(GraphError::Shape {
                rows: weights.nrows(),
                cols: weights.ncols(),
                expected: weights.nrows().max(1),
            });
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFinite);
        }
        Ok(Self(weights))
    }

    pub fn identity(agents: usize) -> Self {
        Self(DMatrix::identity(agents, agents))
    }

    /// Uniform averaging `(1/K) 1 1ᵀ`.
    pub fn averaging(agents: usize) -> Self {
        Self(DMatrix::from_element(agents, agents, 1.0 / agents as f64))
    }

    pub fn agent_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn weight(&self, l: usize, k: usize) -> f64 {
        self.0[(l, k)]
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Metropolis–Hastings weights: `1 / (1 + max(deg_l, deg_k))` on every edge,
/// with the diagonal absorbing the rest of each column.
pub fn build_metropolis(topology: &Topology) -> Result<CombinationMatrix, GraphError> {
    if let Some((from, to)) = topology.unreachable_pair() {
        return Err(GraphError::Disconnected { from, to });
    }
    let k_count = topology.agent_count();
    let deg: Vec<usize> = (0..k_count).map(|k| topology.degree(k)).collect();
    let mut a = DMatrix::zeros(k_count, k_count);
    for k in 0..k_count {
        let mut off = 0.0;
        for l in 0..k_count {
            if l != k && topology.is_neighbor(l, k) {
                let w = 1.0 / (1 + deg[l].max(deg[k])) as f64;
                a[(l, k)] = w;
                off += w;
            }
        }
        a[(k, k)] = 1.0 - off;
    }
    Ok(CombinationMatrix(a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Shape,
    Symmetric,
    Nonnegative,
    ColumnStochastic,
    RowStochastic,
    SupportInAdjacency,
    Primitive,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CheckKind::Shape => "shape",
            CheckKind::Symmetric => "symmetric",
            CheckKind::Nonnegative => "nonnegative",
            CheckKind::ColumnStochastic => "column-stochastic",
            CheckKind::RowStochastic => "row-stochastic",
            CheckKind::SupportInAdjacency => "support-in-adjacency",
            CheckKind::Primitive => "primitive",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub kind: CheckKind,
    pub passed: bool,
    /// Largest violation found; 0 when the check passes exactly.
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, kind: CheckKind) -> Option<&Check> {
        self.checks.iter().find(|c| c.kind == kind)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn tolerance_check(kind: CheckKind, worst: f64) -> Check {
    Check {
        kind,
        passed: worst <= STOCHASTIC_TOL,
        worst_violation: worst,
    }
}

/// Checks every combination-matrix invariant against `topology`.
pub fn validate_combination(a: &CombinationMatrix, topology: &Topology) -> ValidationReport {
    let k_count = topology.agent_count();
    let w = a.weights();
    if w.nrows() != k_count || w.ncols() != k_count {
        return ValidationReport {
            checks: vec![Check {
                kind: CheckKind::Shape,
                passed: false,
                worst_violation: f64::INFINITY,
            }],
        };
    }
    let mut sym = 0.0_f64;
    let mut neg = 0.0_f64;
    let mut support = 0.0_f64;
    for l in 0..k_count {
        for k in 0..k_count {
            sym = sym.max((w[(l, k)] - w[(k, l)]).abs());
            neg = neg.max(-w[(l, k)]);
            if !topology.is_neighbor(l, k) {
                support = support.max(w[(l, k)].abs());
            }
        }
    }
    let col = (0..k_count)
        .map(|k| (w.column(k).sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let row = (0..k_count)
        .map(|l| (w.row(l).sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let primitive = is_primitive(w);
    ValidationReport {
        checks: vec![
            Check {
                kind: CheckKind::Shape,
                passed: true,
                worst_violation: 0.0,
            },
            tolerance_check(CheckKind::Symmetric, sym),
            Check {
                kind: CheckKind::Nonnegative,
                passed: neg <= 0.0,
                worst_violation: neg.max(0.0),
            },
            tolerance_check(CheckKind::ColumnStochastic, col),
            tolerance_check(CheckKind::RowStochastic, row),
            Check {
                kind: CheckKind::SupportInAdjacency,
                passed: support == 0.0,
                worst_violation: support,
            },
            Check {
                kind: CheckKind::Primitive,
                passed: primitive,
                worst_violation: if primitive { 0.0 } else { 1.0 },
            },
        ],
    }
}

/// Whether some power of the positivity pattern of `w` is all-positive.
///
/// Boolean squaring until the exponent reaches `K²`, which exceeds the
/// Wielandt bound `(K-1)² + 1`.
pub fn is_primitive(w: &DMatrix<f64>) -> bool {
    let n = w.nrows();
    let mut pattern: Vec<bool> = (0..n * n).map(|i| w[(i / n, i % n)] > 0.0).collect();
    let mut exponent = 1usize;
    while exponent < n * n {
        let mut next = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                next[i * n + j] = (0..n).any(|m| pattern[i * n + m] && pattern[m * n + j]);
            }
        }
        pattern = next;
        exponent *= 2;
    }
    pattern.iter().all(|&p| p)
}

/// Normalised left eigenvector for eigenvalue 1 (`p A = p`, `Σ p = 1`), by
/// power iteration from a non-uniform start.
pub fn perron_vector(a: &CombinationMatrix) -> Result<DVector<f64>, GraphError> {
    const MAX_ITERS: usize = 200_000;
    const TOL: f64 = 1e-14;
    let n = a.agent_count();
    let at = a.weights().transpose();
    let mut p = DVector::from_fn(n, |i, _| (i + 1) as f64);
    p /= p.sum();
    let mut residual = f64::INFINITY;
    for it in 0..MAX_ITERS {
        let mut next = &at * &p;
        next /= next.sum();
        residual = (&next - &p).amax();
        p = next;
        if residual <= TOL {
            return Ok(p);
        }
        if !residual.is_finite() {
            return Err(GraphError::PerronNotConverged {
                residual,
                iterations: it + 1,
            });
        }
    }
    Err(GraphError::PerronNotConverged {
        residual,
        iterations: MAX_ITERS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &DMatrix<f64>, b: &[f64], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn metropolis_two_agent_path() {
        let a = build_metropolis(&Topology::path(2).unwrap()).unwrap();
        assert!(close(a.weights(), &[0.5, 0.5, 0.5, 0.5], 0.0));
    }

    #[test]
    fn metropolis_single_agent() {
        let a = build_metropolis(&Topology::path(1).unwrap()).unwrap();
        assert_eq!(a.weights()[(0, 0)], 1.0);
    }

    #[test]
    fn metropolis_three_ring() {
        let a = build_metropolis(&Topology::ring(3).unwrap()).unwrap();
        assert!(a.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn metropolis_rejects_disconnected() {
        let topo = Topology::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        match build_metropolis(&topo) {
            Err(GraphError::Disconnected { from: 0, to }) => assert!(to == 2 || to == 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_is_not_primitive() {
        let topo = Topology::ring(3).unwrap();
        let report = validate_combination(&CombinationMatrix::identity(3), &topo);
        assert!(!report.check(CheckKind::Primitive).unwrap().passed);
        assert!(report.check(CheckKind::ColumnStochastic).unwrap().passed);
    }

    #[test]
    fn metropolis_ring_validates() {
        let topo = Topology::ring(3).unwrap();
        let report = validate_combination(&build_metropolis(&topo).unwrap(), &topo);
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn column_sum_defect_is_reported() {
        let topo = Topology::complete(2).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[0.51, 0.5, 0.5, 0.5]);
        let report = validate_combination(&CombinationMatrix::new(w).unwrap(), &topo);
        let col = report.check(CheckKind::ColumnStochastic).unwrap();
        assert!(!col.passed);
        assert!((col.worst_violation - 0.01).abs() < 1e-12);
    }

    #[test]
    fn support_outside_graph_fails() {
        let topo = Topology::path(3).unwrap();
        let w = DMatrix::from_element(3, 3, 1.0 / 3.0);
        let report = validate_combination(&CombinationMatrix::new(w).unwrap(), &topo);
        assert!(!report.check(CheckKind::SupportInAdjacency).unwrap().passed);
    }

    #[test]
    fn perron_small_cases() {
        let p = perron_vector(&CombinationMatrix::identity(1)).unwrap();
        assert_eq!(p[0], 1.0);
        let a = build_metropolis(&Topology::path(2).unwrap()).unwrap();
        let p = perron_vector(&a).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let a = build_metropolis(&Topology::random_geometric(4, 0.8, 3).unwrap()).unwrap();
        let p = perron_vector(&a).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-10));
    }

    #[test]
    fn perron_fails_on_periodic_matrix() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let err = perron_vector(&CombinationMatrix::new(w).unwrap()).unwrap_err();
        assert!(matches!(err, GraphError::PerronNotConverged { .. }));
    }

    #[test]
    fn topology_spec_round_trip() {
        let spec = TopologySpec::RandomGeometric {
            agents: 8,
            radius: 0.7,
            seed: 11,
        };
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<TopologySpec>(&text).unwrap(), spec);
        assert!(
            toml::from_str::<TopologySpec>("kind = \"ring\"\nagents = 3\nradius = 1.0").is_err()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn metropolis_invariants_on_random_graphs(k in 1usize..=20, seed in any::<u64>()) {
            let topo = Topology::random_geometric(k, 0.6, seed).unwrap();
            let a = build_metropolis(&topo).unwrap();
            let report = validate_combination(&a, &topo);
            prop_assert!(report.all_passed(), "{:?}", report);
            let p = perron_vector(&a).unwrap();
            for v in p.iter() {
                prop_assert!((v - 1.0 / k as f64).abs() <= 1e-10);
            }
        }
    }
}
