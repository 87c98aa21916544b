//! Shared generators for the integration suites.

use igeb_net_core::beam::{BeamParams, ParamField, RotationField};
use igeb_net_core::linalg::{Mat3, Mat6, Vec3, Vec6};
use igeb_net_core::network::{InitialDatum, NetworkScenario, NetworkTopology, NodeCondition};
use rand::rngs::StdRng;
use rand::Rng;
use std::path::PathBuf;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// Well-conditioned random SPD matrix with eigenvalues in `[0.5, 2]`.
pub fn random_spd(rng: &mut StdRng) -> Mat6 {
    let a = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let d = Vec6::from_fn(|_, _| rng.random_range(0.5..2.0));
    (q * Mat6::from_diagonal(&d) * q.transpose()).symmetric_part()
}

pub fn random_rotation(rng: &mut StdRng) -> Mat3 {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-3.0..3.0);
    if axis.norm() < 1e-12 {
        return Mat3::identity();
    }
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Constant random SPD parameters, optionally with a curved reference line.
pub fn random_beam(rng: &mut StdRng, curved: bool) -> BeamParams {
    let rotation = if curved {
        RotationField::Helical {
            base: random_rotation(rng),
            curvature: Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
        }
    } else {
        RotationField::Identity
    };
    BeamParams {
        length: 1.0,
        mass: ParamField::Constant(random_spd(rng)),
        flexibility: ParamField::Constant(random_spd(rng)),
        rotation,
    }
}

/// Star with `n` edges, feedback gains at all simple nodes and the interior
/// node free.
pub fn star_scenario(beams: Vec<BeamParams>, gains: Vec<Mat6>) -> NetworkScenario {
    let n = beams.len();
    let topo = NetworkTopology::star(n);
    let mut conditions = vec![NodeCondition::Free; topo.node_count()];
    let mut gains = gains.into_iter();
    for node in topo.simple_nodes() {
        conditions[node] = NodeCondition::Feedback(gains.next().expect("one gain per simple node"));
    }
    NetworkScenario { topology: topo, beams, conditions, initial: InitialDatum::Zero }
}
