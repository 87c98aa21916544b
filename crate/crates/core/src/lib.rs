//! Simulation and Lyapunov-stability certification for tree-shaped networks
//! of intrinsic geometrically exact beams.
//!
//! Each beam carries a twelve-state semilinear hyperbolic system in the
//! velocities and internal forces/moments; beams are joined rigidly at the
//! nodes, with velocity feedback, free or clamped conditions at the
//! boundaries. The crate provides:
//!
//! - coefficient assembly per beam ([`beam`]) and the network/topology layer
//!   with a compatibility checker for initial data ([`network`]);
//! - the characteristic (diagonal) form with per-node reflection matrices and
//!   an independent dense-solve oracle for them ([`diag`]);
//! - an upwind/two-stage explicit simulator with energy, H1 and Lyapunov
//!   tracking ([`sim`]);
//! - construction and grid-verification of quadratic Lyapunov certificates of
//!   exponential decay, including the diagonal-frame node analysis
//!   ([`certify`]);
//! - scenario files, canonical hashing and result export ([`scenario`]).

pub mod beam;
pub mod certify;
pub mod diag;
pub mod grid;
pub mod linalg;
pub mod network;
pub mod scenario;
pub mod sim;
