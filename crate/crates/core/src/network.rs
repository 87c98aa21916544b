//! Oriented-tree topology, node classification and the compatibility checker
//! for initial data.
//!
//! Conventions: edges are indexed `1..=N` and edge `i` ends at the node with
//! the same index; node `0` is simple and is the initial point of edge `1`.
//! A node is *simple* when exactly one edge is incident to it and *multiple*
//! otherwise, in which case it joins its (unique) ending edge with the edges
//! starting there.

use crate::beam::{self, BeamParams, PhysState};
use crate::linalg::{self, Mat6, Vec12, Vec6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid topology: {0:?}")]
    Topology(Vec<TopologyViolation>),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Beam(#[from] beam::BeamError),
}

/// One violation of the orientation/tree conventions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyViolation {
    NotATree(String),
    BadOrientation(String),
    Node0NotSimple,
}

/// Oriented tree given by the starting node of each edge; edge `i` ends at
/// node `i`.
#[derive(Debug, Clone)]
pub struct NetworkTopology {
    parents: Vec<usize>,
}

impl NetworkTopology {
    /// `parents[i-1]` is the initial node of edge `i`.
    pub fn new(parents: Vec<usize>) -> Self {
        NetworkTopology { parents }
    }

    /// Single-edge network `0 -> 1`.
    pub fn single_edge() -> Self {
        NetworkTopology { parents: vec![0] }
    }

    /// Star with `n` edges: `0 -> 1`, then `1 -> i` for `i = 2..=n`.
    pub fn star(n: usize) -> Self {
        let mut parents = vec![0];
        parents.extend(std::iter::repeat(1).take(n.saturating_sub(1)));
        NetworkTopology { parents }
    }

    pub fn edge_count(&self) -> usize {
        self.parents.len()
    }

    pub fn node_count(&self) -> usize {
        self.parents.len() + 1
    }

    /// Initial node of edge `i` (1-based).
    pub fn parent_of(&self, edge: usize) -> usize {
        self.parents[edge - 1]
    }

    /// Edges starting at node `n`, ascending.
    pub fn outgoing(&self, node: usize) -> Vec<usize> {
        (1..=self.edge_count()).filter(|&i| self.parents[i - 1] == node).collect()
    }

    /// Number of edges incident to node `n`.
    pub fn degree(&self, node: usize) -> usize {
        let incoming = usize::from(node >= 1 && node <= self.edge_count());
        incoming + self.outgoing(node).len()
    }

    pub fn is_simple(&self, node: usize) -> bool {
        self.degree(node) == 1
    }

    pub fn simple_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| self.is_simple(n)).collect()
    }

    pub fn multiple_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| self.degree(n) >= 2).collect()
    }

    /// Checks the tree and orientation conventions; violations are collected
    /// rather than short-circuited.
    pub fn validate(&self) -> TopologyReport {
        let mut violations = Vec::new();
        let n = self.edge_count();
        if n == 0 {
            violations.push(TopologyViolation::NotATree("network has no edges".into()));
            return TopologyReport { violations, simple_nodes: vec![], multiple_nodes: vec![] };
        }
        for (idx, &p) in self.parents.iter().enumerate() {
            let edge = idx + 1;
            if p == edge {
                violations.push(TopologyViolation::NotATree(format!("edge {edge} is a self loop")));
            }
            if p > n {
                violations.push(TopologyViolation::BadOrientation(format!(
                    "edge {edge} starts at unknown node {p}"
                )));
            }
        }
        if self.parents[0] != 0 {
            violations.push(TopologyViolation::BadOrientation(
                "node 0 must be the initial point of edge 1".into(),
            ));
        }
        if self.outgoing(0).len() != 1 || self.outgoing(0).first() != Some(&1) {
            violations.push(TopologyViolation::Node0NotSimple);
        }
        // Connectivity from node 0 over the undirected tree; with N edges on
        // N + 1 nodes, connected and acyclic are equivalent.
        let mut seen = vec![false; self.node_count()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            let mut neighbors = self.outgoing(node);
            if node >= 1 && node <= n {
                neighbors.push(self.parents[node - 1]);
            }
            for m in neighbors {
                if m < seen.len() && !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            let missing: Vec<usize> =
                (0..seen.len()).filter(|&k| !seen[k]).collect();
            violations.push(TopologyViolation::NotATree(format!(
                "nodes {missing:?} are not reachable from node 0"
            )));
        }
        TopologyReport {
            violations,
            simple_nodes: self.simple_nodes(),
            multiple_nodes: self.multiple_nodes(),
        }
    }
}

/// Outcome of [`NetworkTopology::validate`].
#[derive(Debug, Clone)]
pub struct TopologyReport {
    pub violations: Vec<TopologyViolation>,
    pub simple_nodes: Vec<usize>,
    pub multiple_nodes: Vec<usize>,
}

impl TopologyReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Boundary/transmission behavior declared at a node.
#[derive(Debug, Clone)]
pub enum NodeCondition {
    /// Velocity feedback with a symmetric positive definite gain.
    Feedback(Mat6),
    /// No external load (zero gain).
    Free,
    /// Homogeneous Dirichlet condition on the velocities.
    Clamped,
}

impl NodeCondition {
    /// Gain matrix, zero for free/clamped.
    pub fn gain(&self) -> Mat6 {
        match self {
            NodeCondition::Feedback(k) => *k,
            _ => Mat6::zeros(),
        }
    }
}

/// Initial datum descriptions; all presets vanish to second order at the
/// beam endpoints so the compatibility conditions hold at orders 0 and 1.
#[derive(Debug, Clone)]
pub enum InitialDatum {
    Zero,
    /// Deterministic interior bump `amplitude * 16 s^2 (1-s)^2` on every
    /// component of every beam.
    Bump { amplitude: f64 },
    /// Seeded random low-order polynomial modulated by the interior bump,
    /// rescaled so the largest state entry equals `amplitude`.
    RandomCompatible { seed: u64, amplitude: f64 },
    /// Compactly supported pulse in selected characteristic components of one
    /// beam; realized through the diagonalizing map by the caller.
    RiemannPulse {
        edge: usize,
        /// `false`: leftward family (first six), `true`: rightward family.
        rightward: bool,
        center: f64,
        width: f64,
        amplitude: f64,
    },
    /// Explicit samples per beam on ascending grids, interpolated linearly.
    Samples(Vec<(Vec<f64>, Vec<Vec12>)>),
}

/// A full problem instance: topology, per-edge beams, per-node conditions and
/// the initial datum.
#[derive(Debug, Clone)]
pub struct NetworkScenario {
    pub topology: NetworkTopology,
    pub beams: Vec<BeamParams>,
    pub conditions: Vec<NodeCondition>,
    pub initial: InitialDatum,
}

impl NetworkScenario {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let report = self.topology.validate();
        if !report.is_valid() {
            return Err(NetworkError::Topology(report.violations));
        }
        if self.beams.len() != self.topology.edge_count() {
            return Err(NetworkError::Invalid(format!(
                "{} beams for {} edges",
                self.beams.len(),
                self.topology.edge_count()
            )));
        }
        if self.conditions.len() != self.topology.node_count() {
            return Err(NetworkError::Invalid(format!(
                "{} node conditions for {} nodes",
                self.conditions.len(),
                self.topology.node_count()
            )));
        }
        for (i, b) in self.beams.iter().enumerate() {
            b.validate().map_err(|e| NetworkError::Invalid(format!("beam {}: {e}", i + 1)))?;
        }
        for (n, cond) in self.conditions.iter().enumerate() {
            match cond {
                NodeCondition::Feedback(k) => {
                    if linalg::asymmetry(k) > linalg::SYM_TOL {
                        return Err(NetworkError::Invalid(format!(
                            "feedback gain at node {n} is not symmetric"
                        )));
                    }
                    if linalg::min_eig(k) <= 0.0 {
                        return Err(NetworkError::Invalid(format!(
                            "feedback gain at node {n} is not positive definite"
                        )));
                    }
                }
                NodeCondition::Clamped => {
                    if !self.topology.is_simple(n) {
                        return Err(NetworkError::Invalid(format!(
                            "node {n} is multiple and cannot be clamped"
                        )));
                    }
                }
                NodeCondition::Free => {}
            }
        }
        if let InitialDatum::Samples(per_beam) = &self.initial {
            if per_beam.len() != self.beams.len() {
                return Err(NetworkError::Invalid("one sample array per beam required".into()));
            }
            for (i, (xs, ys)) in per_beam.iter().enumerate() {
                if xs.len() != ys.len() || xs.len() < 2 {
                    return Err(NetworkError::Invalid(format!("beam {}: malformed samples", i + 1)));
                }
                if ys.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
                    return Err(NetworkError::Invalid(format!("beam {}: non-finite sample", i + 1)));
                }
            }
        }
        Ok(())
    }

    /// True when the network is a star controlled per the stabilization
    /// setting: one multiple node (node 1), which is free, and feedback at
    /// every simple node.
    pub fn is_controlled_star(&self) -> bool {
        let multiple = self.topology.multiple_nodes();
        if self.topology.edge_count() >= 2 && multiple != vec![1] {
            return false;
        }
        for n in 0..self.topology.node_count() {
            let is_multiple = !self.topology.is_simple(n);
            match (&self.conditions[n], is_multiple) {
                (NodeCondition::Free, true) => {}
                (NodeCondition::Feedback(_), false) => {}
                _ => return false,
            }
        }
        true
    }
}

/// Compatibility order of Definition-style initial-data checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompatOrder {
    Zero,
    One,
}

/// Residual of one nodal condition evaluated on the initial datum.
#[derive(Debug, Clone)]
pub struct CompatEntry {
    pub node: usize,
    pub order: u8,
    pub condition: String,
    pub residual: f64,
}

/// Report of [`check_compatibility`].
#[derive(Debug, Clone)]
pub struct CompatReport {
    pub entries: Vec<CompatEntry>,
    pub threshold: f64,
}

impl CompatReport {
    pub fn max_residual(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |acc, e| acc.max(e.residual))
    }

    pub fn passes(&self) -> bool {
        self.max_residual() <= self.threshold
    }
}

/// Default pass threshold: discrete data cannot satisfy the conditions
/// exactly unless constructed to.
pub const COMPAT_THRESHOLD: f64 = 1e-8;

fn endpoint_values(ys: &[Vec12]) -> (Vec12, Vec12) {
    (ys[0], ys[ys.len() - 1])
}

/// Evaluates every nodal condition on the sampled initial datum. For first
/// order the datum is advanced through the governing equation and the same
/// conditions are re-checked on the resulting rate.
pub fn check_compatibility(
    scenario: &NetworkScenario,
    grids: &[Vec<f64>],
    state: &PhysState,
    order: CompatOrder,
    threshold: f64,
) -> Result<CompatReport, NetworkError> {
    scenario.validate()?;
    if grids.len() != scenario.beams.len() || state.per_beam.len() != scenario.beams.len() {
        return Err(NetworkError::Invalid("one grid and sample array per beam required".into()));
    }
    let mut entries = Vec::new();
    collect_residuals(scenario, state, 0, &mut entries);
    if order == CompatOrder::One {
        let mut rate = PhysState { per_beam: Vec::with_capacity(scenario.beams.len()) };
        for ((params, xs), ys) in scenario.beams.iter().zip(grids).zip(&state.per_beam) {
            if ys.len() < 3 {
                return Err(NetworkError::Invalid(
                    "first-order compatibility needs at least three grid points".into(),
                ));
            }
            rate.per_beam.push(beam::time_derivative(params, xs, ys)?);
        }
        collect_residuals(scenario, &rate, 1, &mut entries);
    }
    Ok(CompatReport { entries, threshold })
}

fn collect_residuals(
    scenario: &NetworkScenario,
    state: &PhysState,
    order: u8,
    entries: &mut Vec<CompatEntry>,
) {
    let topo = &scenario.topology;
    let ends: Vec<(Vec12, Vec12)> = state.per_beam.iter().map(|ys| endpoint_values(ys)).collect();
    let rbar_start = |i: usize| scenario.beams[i - 1].block_rotation_at(0.0);
    let rbar_end = |i: usize| scenario.beams[i - 1].block_rotation_at(scenario.beams[i - 1].length);

    for n in 0..topo.node_count() {
        let cond = &scenario.conditions[n];
        if topo.is_simple(n) {
            if n == 0 {
                let y = ends[0].0;
                let (v, z) = (beam::velocity_part(&y), beam::forces_part(&y));
                let (label, residual) = match cond {
                    NodeCondition::Clamped => ("clamped velocity at node 0", v.norm()),
                    _ => ("force balance at node 0", (z - cond.gain() * v).norm()),
                };
                entries.push(CompatEntry { node: 0, order, condition: label.into(), residual });
            } else {
                let y = ends[n - 1].1;
                let (v, z) = (beam::velocity_part(&y), beam::forces_part(&y));
                let (label, residual) = match cond {
                    NodeCondition::Clamped => ("clamped velocity", v.norm()),
                    _ => ("force balance", (z + cond.gain() * v).norm()),
                };
                entries.push(CompatEntry {
                    node: n,
                    order,
                    condition: format!("{label} at node {n}"),
                    residual,
                });
            }
        } else {
            let y_end = ends[n - 1].1;
            let (v_n, z_n) = (beam::velocity_part(&y_end), beam::forces_part(&y_end));
            let rn = rbar_end(n);
            let mut kirchhoff: Vec6 = rn * z_n + rn * cond.gain() * v_n;
            for i in topo.outgoing(n) {
                let y0 = ends[i - 1].0;
                let (v_i, z_i) = (beam::velocity_part(&y0), beam::forces_part(&y0));
                let ri = rbar_start(i);
                entries.push(CompatEntry {
                    node: n,
                    order,
                    condition: format!("velocity continuity of edge {i} at node {n}"),
                    residual: (ri * v_i - rn * v_n).norm(),
                });
                kirchhoff -= ri * z_i;
            }
            entries.push(CompatEntry {
                node: n,
                order,
                condition: format!("force/moment balance at node {n}"),
                residual: kirchhoff.norm(),
            });
        }
    }
}
