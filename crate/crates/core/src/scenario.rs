//! Scenario files, canonical hashing and result export.
//!
//! Scenarios are JSON documents listing edges (with per-beam parameter
//! fields), node conditions and an initial datum. Unknown keys are rejected.
//! The `"transparent"` node keyword is expanded into the matching feedback
//! gain at load time, so downstream code only ever sees free, clamped or
//! feedback nodes.

use crate::beam::{BeamParams, ParamField, RotationField};
use crate::diag::{transparent_gain, EndpointSide};
use crate::linalg::{Mat3, Mat6, Vec3, Vec12};
use crate::network::{InitialDatum, NetworkScenario, NetworkTopology, NodeCondition};
use crate::sim::TimeSeries;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario: {}", .0.join("; "))]
    Validation(Vec<String>),
}

/// On-disk scenario document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub edges: Vec<EdgeSpec>,
    pub nodes: Vec<NodeSpec>,
    pub initial: InitialSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub id: usize,
    pub length: f64,
    pub parent_node: usize,
    pub mass: FieldSpec,
    pub flexibility: FieldSpec,
    pub rotation: RotationSpec,
}

/// 6x6 symmetric positive definite field description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSpec {
    Identity,
    /// Constant diagonal with the given six entries.
    Diagonal(Vec<f64>),
    /// Constant full matrix as six rows of six.
    Constant(Vec<Vec<f64>>),
    Sampled { xs: Vec<f64>, values: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationSpec {
    Identity,
    Constant(Vec<Vec<f64>>),
    Helical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base: Option<Vec<Vec<f64>>>,
        curvature: [f64; 3],
    },
    Sampled { xs: Vec<f64>, values: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: usize,
    pub condition: NodeCondSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeCondSpec {
    Free,
    Clamped,
    /// Expands to the reflection-silencing gain of the incident beam.
    Transparent,
    Feedback(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseDirection {
    Leftward,
    Rightward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSpec {
    Zero,
    Bump { amplitude: f64 },
    RandomCompatible { seed: u64, amplitude: f64 },
    RiemannPulse { edge: usize, direction: PulseDirection, center: f64, width: f64, amplitude: f64 },
    Samples(Vec<SampleSpec>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub xs: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

fn mat6_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Mat6, String> {
    if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
        return Err(format!("{what}: expected 6 rows of 6 entries"));
    }
    Ok(Mat6::from_fn(|i, j| rows[i][j]))
}

fn mat3_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Mat3, String> {
    if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
        return Err(format!("{what}: expected 3 rows of 3 entries"));
    }
    Ok(Mat3::from_fn(|i, j| rows[i][j]))
}

fn field_from_spec(spec: &FieldSpec, what: &str) -> Result<ParamField, String> {
    Ok(match spec {
        FieldSpec::Identity => ParamField::Constant(Mat6::identity()),
        FieldSpec::Diagonal(entries) => {
            if entries.len() != 6 {
                return Err(format!("{what}: diagonal needs 6 entries"));
            }
            let mut m = Mat6::zeros();
            for (i, &e) in entries.iter().enumerate() {
                m[(i, i)] = e;
            }
            ParamField::Constant(m)
        }
        FieldSpec::Constant(rows) => ParamField::Constant(mat6_from_rows(rows, what)?),
        FieldSpec::Sampled { xs, values } => {
            let mats = values
                .iter()
                .map(|rows| mat6_from_rows(rows, what))
                .collect::<Result<Vec<_>, _>>()?;
            ParamField::Sampled { xs: xs.clone(), values: mats }
        }
    })
}

fn rotation_from_spec(spec: &RotationSpec, what: &str) -> Result<RotationField, String> {
    Ok(match spec {
        RotationSpec::Identity => RotationField::Identity,
        RotationSpec::Constant(rows) => RotationField::Constant(mat3_from_rows(rows, what)?),
        RotationSpec::Helical { base, curvature } => RotationField::Helical {
            base: match base {
                Some(rows) => mat3_from_rows(rows, what)?,
                None => Mat3::identity(),
            },
            curvature: Vec3::new(curvature[0], curvature[1], curvature[2]),
        },
        RotationSpec::Sampled { xs, values } => {
            let mats = values
                .iter()
                .map(|rows| mat3_from_rows(rows, what))
                .collect::<Result<Vec<_>, _>>()?;
            RotationField::Sampled { xs: xs.clone(), values: mats }
        }
    })
}

/// Parses and fully validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<NetworkScenario, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    convert_scenario(&file)
}

/// Loads a scenario from disk; see [`parse_scenario`].
pub fn load_scenario(path: impl AsRef<Path>) -> Result<NetworkScenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

/// Converts the document into a validated scenario, expanding transparent
/// node conditions into explicit gains.
pub fn convert_scenario(file: &ScenarioFile) -> Result<NetworkScenario, ScenarioError> {
    let mut errors: Vec<String> = Vec::new();
    let n = file.edges.len();
    if n == 0 {
        return Err(ScenarioError::Validation(vec!["scenario has no edges".into()]));
    }

    let mut parents = vec![usize::MAX; n];
    let mut beams: Vec<Option<BeamParams>> = vec![None; n];
    for edge in &file.edges {
        if edge.id == 0 || edge.id > n {
            errors.push(format!("edge id {} out of range 1..={n}", edge.id));
            continue;
        }
        if parents[edge.id - 1] != usize::MAX {
            errors.push(format!("duplicate edge id {}", edge.id));
            continue;
        }
        parents[edge.id - 1] = edge.parent_node;
        let what = format!("edge {}", edge.id);
        let mass = field_from_spec(&edge.mass, &format!("{what} mass"));
        let flexibility = field_from_spec(&edge.flexibility, &format!("{what} flexibility"));
        let rotation = rotation_from_spec(&edge.rotation, &format!("{what} rotation"));
        match (mass, flexibility, rotation) {
            (Ok(mass), Ok(flexibility), Ok(rotation)) => {
                beams[edge.id - 1] =
                    Some(BeamParams { length: edge.length, mass, flexibility, rotation });
            }
            (m, f, r) => {
                for res in [m.err(), f.err(), r.err()].into_iter().flatten() {
                    errors.push(res);
                }
            }
        }
    }
    for (i, p) in parents.iter().enumerate() {
        if *p == usize::MAX {
            errors.push(format!("missing edge id {}", i + 1));
        }
    }
    if !errors.is_empty() {
        return Err(ScenarioError::Validation(errors));
    }
    let topology = NetworkTopology::new(parents);
    let report = topology.validate();
    for v in &report.violations {
        errors.push(format!("{v:?}"));
    }
    let beams: Vec<BeamParams> = beams.into_iter().map(|b| b.expect("checked above")).collect();
    for (i, b) in beams.iter().enumerate() {
        if let Err(e) = b.validate() {
            errors.push(format!("beam {}: {e}", i + 1));
        }
    }
    if !errors.is_empty() {
        return Err(ScenarioError::Validation(errors));
    }

    let mut conditions: Vec<Option<NodeCondition>> = vec![None; n + 1];
    for node in &file.nodes {
        if node.id > n {
            errors.push(format!("node id {} out of range 0..={n}", node.id));
            continue;
        }
        if conditions[node.id].is_some() {
            errors.push(format!("duplicate node id {}", node.id));
            continue;
        }
        let cond = match &node.condition {
            NodeCondSpec::Free => Ok(NodeCondition::Free),
            NodeCondSpec::Clamped => Ok(NodeCondition::Clamped),
            NodeCondSpec::Feedback(rows) => {
                mat6_from_rows(rows, &format!("feedback gain at node {}", node.id))
                    .map(NodeCondition::Feedback)
            }
            NodeCondSpec::Transparent => {
                if !topology.is_simple(node.id) {
                    Err(format!("transparent condition at multiple node {}", node.id))
                } else {
                    let (beam, side) = if node.id == 0 {
                        (&beams[0], EndpointSide::Start)
                    } else {
                        (&beams[node.id - 1], EndpointSide::End)
                    };
                    transparent_gain(beam, side)
                        .map(NodeCondition::Feedback)
                        .map_err(|e| format!("transparent gain at node {}: {e}", node.id))
                }
            }
        };
        match cond {
            Ok(c) => conditions[node.id] = Some(c),
            Err(e) => errors.push(e),
        }
    }
    for (id, c) in conditions.iter().enumerate() {
        if c.is_none() {
            errors.push(format!("missing condition for node {id}"));
        }
    }
    if !errors.is_empty() {
        return Err(ScenarioError::Validation(errors));
    }
    let conditions: Vec<NodeCondition> =
        conditions.into_iter().map(|c| c.expect("checked above")).collect();

    let initial = match &file.initial {
        InitialSpec::Zero => InitialDatum::Zero,
        InitialSpec::Bump { amplitude } => InitialDatum::Bump { amplitude: *amplitude },
        InitialSpec::RandomCompatible { seed, amplitude } => {
            InitialDatum::RandomCompatible { seed: *seed, amplitude: *amplitude }
        }
        InitialSpec::RiemannPulse { edge, direction, center, width, amplitude } => {
            InitialDatum::RiemannPulse {
                edge: *edge,
                rightward: matches!(direction, PulseDirection::Rightward),
                center: *center,
                width: *width,
                amplitude: *amplitude,
            }
        }
        InitialSpec::Samples(samples) => {
            let mut per_beam = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                let mut vals = Vec::with_capacity(s.values.len());
                for v in &s.values {
                    if v.len() != 12 {
                        errors.push(format!("beam {} sample is not a 12-vector", i + 1));
                        break;
                    }
                    vals.push(Vec12::from_fn(|c, _| v[c]));
                }
                per_beam.push((s.xs.clone(), vals));
            }
            InitialDatum::Samples(per_beam)
        }
    };
    if !errors.is_empty() {
        return Err(ScenarioError::Validation(errors));
    }

    let scenario = NetworkScenario { topology, beams, conditions, initial };
    scenario
        .validate()
        .map_err(|e| ScenarioError::Validation(vec![e.to_string()]))?;
    Ok(scenario)
}

fn rows6(m: &Mat6) -> Vec<Vec<f64>> {
    (0..6).map(|i| (0..6).map(|j| m[(i, j)]).collect()).collect()
}

fn rows3(m: &Mat3) -> Vec<Vec<f64>> {
    (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect()
}

/// Renders a validated scenario back into the document form.
pub fn to_file_format(scenario: &NetworkScenario) -> ScenarioFile {
    let field_spec = |f: &ParamField| match f {
        ParamField::Constant(m) => FieldSpec::Constant(rows6(m)),
        ParamField::Sampled { xs, values } => FieldSpec::Sampled {
            xs: xs.clone(),
            values: values.iter().map(rows6).collect(),
        },
    };
    let rotation_spec = |r: &RotationField| match r {
        RotationField::Identity => RotationSpec::Identity,
        RotationField::Constant(m) => RotationSpec::Constant(rows3(m)),
        RotationField::Helical { base, curvature } => RotationSpec::Helical {
            base: Some(rows3(base)),
            curvature: [curvature.x, curvature.y, curvature.z],
        },
        RotationField::Sampled { xs, values } => RotationSpec::Sampled {
            xs: xs.clone(),
            values: values.iter().map(rows3).collect(),
        },
    };
    let edges = scenario
        .beams
        .iter()
        .enumerate()
        .map(|(i, b)| EdgeSpec {
            id: i + 1,
            length: b.length,
            parent_node: scenario.topology.parent_of(i + 1),
            mass: field_spec(&b.mass),
            flexibility: field_spec(&b.flexibility),
            rotation: rotation_spec(&b.rotation),
        })
        .collect();
    let nodes = scenario
        .conditions
        .iter()
        .enumerate()
        .map(|(id, c)| NodeSpec {
            id,
            condition: match c {
                NodeCondition::Free => NodeCondSpec::Free,
                NodeCondition::Clamped => NodeCondSpec::Clamped,
                NodeCondition::Feedback(k) => NodeCondSpec::Feedback(rows6(k)),
            },
        })
        .collect();
    let initial = match &scenario.initial {
        InitialDatum::Zero => InitialSpec::Zero,
        InitialDatum::Bump { amplitude } => InitialSpec::Bump { amplitude: *amplitude },
        InitialDatum::RandomCompatible { seed, amplitude } => {
            InitialSpec::RandomCompatible { seed: *seed, amplitude: *amplitude }
        }
        InitialDatum::RiemannPulse { edge, rightward, center, width, amplitude } => {
            InitialSpec::RiemannPulse {
                edge: *edge,
                direction: if *rightward {
                    PulseDirection::Rightward
                } else {
                    PulseDirection::Leftward
                },
                center: *center,
                width: *width,
                amplitude: *amplitude,
            }
        }
        InitialDatum::Samples(samples) => InitialSpec::Samples(
            samples
                .iter()
                .map(|(xs, ys)| SampleSpec {
                    xs: xs.clone(),
                    values: ys.iter().map(|y| y.iter().cloned().collect()).collect(),
                })
                .collect(),
        ),
    };
    ScenarioFile { edges, nodes, initial }
}

struct Hasher {
    sha: Sha256,
}

impl Hasher {
    fn new() -> Self {
        Hasher { sha: Sha256::new() }
    }

    fn tag(&mut self, t: &str) {
        self.sha.update(t.as_bytes());
        self.sha.update([0u8]);
    }

    fn f64(&mut self, v: f64) {
        self.sha.update(v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.sha.update((v as u64).to_le_bytes());
    }

    fn mat6(&mut self, m: &Mat6) {
        for i in 0..6 {
            for j in 0..6 {
                self.f64(m[(i, j)]);
            }
        }
    }

    fn mat3(&mut self, m: &Mat3) {
        for i in 0..3 {
            for j in 0..3 {
                self.f64(m[(i, j)]);
            }
        }
    }
}

/// Platform-stable content hash of a scenario: canonical field order with
/// little-endian float bits.
pub fn scenario_hash(scenario: &NetworkScenario) -> String {
    let mut h = Hasher::new();
    h.tag("edges");
    h.usize(scenario.topology.edge_count());
    for (i, beam) in scenario.beams.iter().enumerate() {
        h.usize(scenario.topology.parent_of(i + 1));
        h.f64(beam.length);
        match &beam.mass {
            ParamField::Constant(m) => {
                h.tag("constant");
                h.mat6(m);
            }
            ParamField::Sampled { xs, values } => {
                h.tag("sampled");
                h.usize(xs.len());
                for (x, m) in xs.iter().zip(values) {
                    h.f64(*x);
                    h.mat6(m);
                }
            }
        }
        match &beam.flexibility {
            ParamField::Constant(m) => {
                h.tag("constant");
                h.mat6(m);
            }
            ParamField::Sampled { xs, values } => {
                h.tag("sampled");
                h.usize(xs.len());
                for (x, m) in xs.iter().zip(values) {
                    h.f64(*x);
                    h.mat6(m);
                }
            }
        }
        match &beam.rotation {
            RotationField::Identity => h.tag("identity"),
            RotationField::Constant(r) => {
                h.tag("constant");
                h.mat3(r);
            }
            RotationField::Helical { base, curvature } => {
                h.tag("helical");
                h.mat3(base);
                h.f64(curvature.x);
                h.f64(curvature.y);
                h.f64(curvature.z);
            }
            RotationField::Sampled { xs, values } => {
                h.tag("sampled");
                h.usize(xs.len());
                for (x, r) in xs.iter().zip(values) {
                    h.f64(*x);
                    h.mat3(r);
                }
            }
        }
    }
    h.tag("nodes");
    for cond in &scenario.conditions {
        match cond {
            NodeCondition::Free => h.tag("free"),
            NodeCondition::Clamped => h.tag("clamped"),
            NodeCondition::Feedback(k) => {
                h.tag("feedback");
                h.mat6(k);
            }
        }
    }
    h.tag("initial");
    match &scenario.initial {
        InitialDatum::Zero => h.tag("zero"),
        InitialDatum::Bump { amplitude } => {
            h.tag("bump");
            h.f64(*amplitude);
        }
        InitialDatum::RandomCompatible { seed, amplitude } => {
            h.tag("random_compatible");
            h.usize(*seed as usize);
            h.f64(*amplitude);
        }
        InitialDatum::RiemannPulse { edge, rightward, center, width, amplitude } => {
            h.tag("riemann_pulse");
            h.usize(*edge);
            h.usize(usize::from(*rightward));
            h.f64(*center);
            h.f64(*width);
            h.f64(*amplitude);
        }
        InitialDatum::Samples(samples) => {
            h.tag("samples");
            for (xs, ys) in samples {
                h.usize(xs.len());
                for (x, y) in xs.iter().zip(ys) {
                    h.f64(*x);
                    for c in 0..12 {
                        h.f64(y[c]);
                    }
                }
            }
        }
    }
    let digest = h.sha.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every output set.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub scenario_hash: String,
    pub outputs: Vec<String>,
    pub parameters: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, scenario_hash: &str, parameters: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            scenario_hash: scenario_hash.to_string(),
            outputs: Vec::new(),
            parameters,
        }
    }
}

/// CSV export: one row per record with the fixed header
/// `t,E_phys,E_diag,Lyap,H1`; the Lyapunov column stays empty when no
/// certificate was attached.
pub fn write_timeseries_csv(out: &mut impl Write, series: &TimeSeries) -> std::io::Result<()> {
    writeln!(out, "t,E_phys,E_diag,Lyap,H1")?;
    for (k, t) in series.times.iter().enumerate() {
        let lyap = match &series.lyapunov {
            Some(values) => format!("{:.17e}", values[k]),
            None => String::new(),
        };
        writeln!(
            out,
            "{:.17e},{:.17e},{:.17e},{},{:.17e}",
            t, series.energy_phys[k], series.energy_diag[k], lyap, series.h1[k]
        )?;
    }
    Ok(())
}

/// JSON export mirroring the CSV fields plus the scenario hash and the
/// per-node dissipation rates.
pub fn timeseries_json(series: &TimeSeries, scenario_hash: &str) -> serde_json::Value {
    serde_json::json!({
        "scenario_hash": scenario_hash,
        "t": series.times,
        "E_phys": series.energy_phys,
        "E_diag": series.energy_diag,
        "Lyap": series.lyapunov,
        "H1": series.h1,
        "node_dissipation": series.node_dissipation,
    })
}

/// Full-state snapshot of one beam: rows `x, y0..y11`.
pub fn write_state_csv(
    out: &mut impl Write,
    xs: &[f64],
    ys: &[Vec12],
) -> std::io::Result<()> {
    write!(out, "x")?;
    for c in 0..12 {
        write!(out, ",y{c}")?;
    }
    writeln!(out)?;
    for (x, y) in xs.iter().zip(ys) {
        write!(out, "{x:.17e}")?;
        for c in 0..12 {
            write!(out, ",{:.17e}", y[c])?;
        }
        writeln!(out)?;
    }
    Ok(())
}
