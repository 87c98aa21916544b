//! Characteristic (diagonal) form of the beam system and the nodal coupling
//! it induces.
//!
//! Per beam, the transport coefficient is diagonalized as
//! `A = L^-1 diag(-D, D) L` where `D` carries the square roots of the
//! eigenvalues of `Theta = C^-1/2 M^-1 C^-1/2`, ascending. Per node, the
//! outgoing characteristic components are expressed as a reflection matrix
//! applied to the incoming ones; a dense linear solve of the raw
//! continuity/balance system is kept alongside as an independent oracle.

use crate::beam::{BeamParams, PhysState};
use crate::grid::fd_derivative;
use crate::linalg::{spd_power, sym_eig6, LinalgError, Mat6, Mat12, SpdPower, Vec6, Vec12};
use crate::network::{NetworkScenario, NodeCondition};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Beam(#[from] crate::beam::BeamError),
    #[error("eigenvalue crossing at x = {x}: relative gap {gap:.3e} below 1e-8; \
             a smooth ordered eigendecomposition cannot be certified")]
    EigenvalueCrossing { x: f64, gap: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("singular nodal system at node {node}")]
    SingularSystem { node: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Minimal admissible relative gap between consecutive eigenvalues of a
/// varying `Theta` field.
pub const CROSSING_GAP: f64 = 1e-8;

/// Diagonalization data and coefficient caches at one grid point.
#[derive(Debug, Clone)]
pub struct PointDiag {
    pub theta: Mat6,
    /// Unitary factor with `Theta = U^T D^2 U`.
    pub u: Mat6,
    /// Ascending characteristic speeds (square roots of `Theta` eigenvalues).
    pub d: Vec6,
    pub l: Mat12,
    pub l_inv: Mat12,
    /// Signed speeds `(-d, d)` in the component order of the diagonal state.
    pub speeds: Vec12,
    /// Diagonal-frame lower-order coefficient `L B_phys L^-1 + L A dL^-1/dx`.
    pub b: Mat12,
    pub mass: Mat6,
    pub flex: Mat6,
    pub mass_inv: Mat6,
    pub flex_inv: Mat6,
    /// Physical transport coefficient at the point.
    pub a_phys: Mat12,
    /// Physical lower-order coefficient at the point.
    pub b_phys: Mat12,
}

/// Per-beam diagonalization on a grid.
#[derive(Debug, Clone)]
pub struct BeamDiagonalization {
    pub xs: Vec<f64>,
    pub points: Vec<PointDiag>,
}

impl BeamDiagonalization {
    pub fn start(&self) -> &PointDiag {
        &self.points[0]
    }

    pub fn end(&self) -> &PointDiag {
        &self.points[self.points.len() - 1]
    }

    pub fn at_side(&self, side: EndpointSide) -> &PointDiag {
        match side {
            EndpointSide::Start => self.start(),
            EndpointSide::End => self.end(),
        }
    }
}

/// Which end of a beam a nodal quantity is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointSide {
    Start,
    End,
}

/// `Theta = C^-1/2 M^-1 C^-1/2`, symmetric positive definite.
pub fn compute_theta(params: &BeamParams, x: f64) -> Result<Mat6, DiagError> {
    let c_inv_sqrt = spd_power(&params.flexibility_at(x), SpdPower::InvSqrt)?;
    let m_inv = spd_power(&params.mass_at(x), SpdPower::Inv)?;
    Ok((c_inv_sqrt * m_inv * c_inv_sqrt).symmetric_part())
}

fn point_factors(params: &BeamParams, x: f64) -> Result<(PointDiag, Mat6, Mat6), DiagError> {
    let mass = params.mass_at(x);
    let flex = params.flexibility_at(x);
    let mass_inv = spd_power(&mass, SpdPower::Inv)?;
    let flex_inv = spd_power(&flex, SpdPower::Inv)?;
    let c_sqrt = spd_power(&flex, SpdPower::Sqrt)?;
    let c_inv_sqrt = spd_power(&flex, SpdPower::InvSqrt)?;
    let theta = (c_inv_sqrt * mass_inv * c_inv_sqrt).symmetric_part();
    let eig = sym_eig6(&theta)?;
    if eig.values[0] <= 0.0 {
        return Err(LinalgError::NotSpd { min_eig: eig.values[0], max_eig: eig.values[5] }.into());
    }
    let d = Vec6::from_fn(|i, _| eig.values[i].sqrt());
    let u = eig.vectors.transpose();

    let u_cinv = u * c_inv_sqrt;
    let du_c = Mat6::from_diagonal(&d) * u * c_sqrt;
    let mut l = Mat12::zeros();
    l.fixed_view_mut::<6, 6>(0, 0).copy_from(&u_cinv);
    l.fixed_view_mut::<6, 6>(0, 6).copy_from(&du_c);
    l.fixed_view_mut::<6, 6>(6, 0).copy_from(&u_cinv);
    l.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-du_c));

    let cu = c_sqrt * u.transpose();
    let cu_dinv = c_inv_sqrt * u.transpose() * Mat6::from_diagonal(&d.map(|s| 1.0 / s));
    let mut l_inv = Mat12::zeros();
    l_inv.fixed_view_mut::<6, 6>(0, 0).copy_from(&(0.5 * cu));
    l_inv.fixed_view_mut::<6, 6>(0, 6).copy_from(&(0.5 * cu));
    l_inv.fixed_view_mut::<6, 6>(6, 0).copy_from(&(0.5 * cu_dinv));
    l_inv.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-0.5 * cu_dinv));

    let mut speeds = Vec12::zeros();
    for i in 0..6 {
        speeds[i] = -d[i];
        speeds[i + 6] = d[i];
    }

    let a_phys = params.transport(x)?;
    let b_phys = params.lower_order(x)?;
    let point = PointDiag {
        theta,
        u,
        d,
        l,
        l_inv,
        speeds,
        b: Mat12::zeros(),
        mass,
        flex,
        mass_inv,
        flex_inv,
        a_phys,
        b_phys,
    };
    Ok((point, c_sqrt, c_inv_sqrt))
}

/// Builds the diagonalization of one beam on an ascending grid, including the
/// diagonal-frame lower-order coefficient. Varying parameter fields must keep
/// the eigenvalues of `Theta` separated; crossings are rejected rather than
/// smoothed.
pub fn build_diagonalization(
    params: &BeamParams,
    grid: &[f64],
) -> Result<BeamDiagonalization, DiagError> {
    if grid.len() < 2 {
        return Err(DiagError::Invalid("grid needs at least two points".into()));
    }
    let constant_factors = params.mass.is_constant() && params.flexibility.is_constant();
    let mut points = Vec::with_capacity(grid.len());
    if constant_factors {
        let (template, _, _) = point_factors(params, grid[0])?;
        for &x in grid {
            let mut p = template.clone();
            p.b_phys = params.lower_order(x)?;
            p.b = p.l * p.b_phys * p.l_inv;
            points.push(p);
        }
    } else {
        for &x in grid {
            let (p, _, _) = point_factors(params, x)?;
            let gap = (0..5)
                .map(|i| p.d[i + 1] * p.d[i + 1] - p.d[i] * p.d[i])
                .fold(f64::INFINITY, f64::min);
            let scale = p.d[5] * p.d[5];
            if gap <= CROSSING_GAP * scale {
                return Err(DiagError::EigenvalueCrossing { x, gap: gap / scale });
            }
            points.push(p);
        }
        let l_invs: Vec<Mat12> = points.iter().map(|p| p.l_inv).collect();
        let dl_inv = fd_derivative(grid, &l_invs);
        for (p, dli) in points.iter_mut().zip(dl_inv) {
            p.b = p.l * p.b_phys * p.l_inv + p.l * p.a_phys * dli;
        }
    }
    Ok(BeamDiagonalization { xs: grid.to_vec(), points })
}

/// Diagonal-frame state samples; the first six components travel leftward,
/// the last six rightward.
#[derive(Debug, Clone)]
pub struct DiagState {
    pub per_beam: Vec<Vec<Vec12>>,
}

impl DiagState {
    pub fn zeros(points_per_beam: &[usize]) -> Self {
        DiagState {
            per_beam: points_per_beam.iter().map(|&n| vec![Vec12::zeros(); n]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.per_beam
            .iter()
            .flatten()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.per_beam.iter().flatten().all(|r| r.iter().all(|v| v.is_finite()))
    }
}

/// Pointwise change of variables `r = L y`.
pub fn riemann_forward(
    diags: &[BeamDiagonalization],
    phys: &PhysState,
) -> Result<DiagState, DiagError> {
    map_state(diags, &phys.per_beam, |p, y| p.l * y).map(|per_beam| DiagState { per_beam })
}

/// Pointwise change of variables `y = L^-1 r`.
pub fn riemann_inverse(
    diags: &[BeamDiagonalization],
    diag_state: &DiagState,
) -> Result<PhysState, DiagError> {
    map_state(diags, &diag_state.per_beam, |p, r| p.l_inv * r)
        .map(|per_beam| PhysState { per_beam })
}

fn map_state(
    diags: &[BeamDiagonalization],
    input: &[Vec<Vec12>],
    f: impl Fn(&PointDiag, &Vec12) -> Vec12,
) -> Result<Vec<Vec<Vec12>>, DiagError> {
    if diags.len() != input.len() {
        return Err(DiagError::GridMismatch(format!(
            "{} diagonalizations vs {} state arrays",
            diags.len(),
            input.len()
        )));
    }
    let mut out = Vec::with_capacity(input.len());
    for (d, values) in diags.iter().zip(input) {
        if d.points.len() != values.len() {
            return Err(DiagError::GridMismatch(format!(
                "{} grid points vs {} samples",
                d.points.len(),
                values.len()
            )));
        }
        out.push(d.points.iter().zip(values).map(|(p, v)| f(p, v)).collect());
    }
    Ok(out)
}

/// Per-node coupling data. Incident slots are ordered with the ending beam
/// first (node 0: beam 1 at its start) followed by the starting beams in
/// ascending edge order, matching the stacking of outgoing/incoming
/// information.
#[derive(Debug, Clone)]
pub struct NodeCoupling {
    pub node: usize,
    /// Edge index per slot.
    pub edges: Vec<usize>,
    pub condition: NodeCondition,
    pub is_multiple: bool,
    /// Frame-weighted flexibility factors, one per slot (invertible).
    pub gammas: Vec<Mat6>,
    pub gamma_invs: Vec<Mat6>,
    /// Frame-weighted impedance factors, one per slot (symmetric positive
    /// definite).
    pub sigmas: Vec<Mat6>,
    /// Rotated feedback gain.
    pub kbar: Mat6,
    /// Sum of the incident impedance factors.
    pub sigma_sum: Mat6,
    /// Characteristic speeds at the incident endpoints, one per slot.
    pub dbars: Vec<Vec6>,
    /// Combined balance rows, multiple nodes only (6 x 6k).
    pub alpha: Option<DMatrix<f64>>,
    pub beta: Option<DMatrix<f64>>,
    /// Out-from-in reflection matrix (6k x 6k).
    pub reflection: DMatrix<f64>,
}

impl NodeCoupling {
    pub fn k(&self) -> usize {
        self.edges.len()
    }

    /// Stacked speed matrix over the slots, as a diagonal vector.
    pub fn dbar_stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(6 * self.k());
        for (s, d) in self.dbars.iter().enumerate() {
            for i in 0..6 {
                out[6 * s + i] = d[i];
            }
        }
        out
    }
}

fn slot_data(
    beam: &BeamParams,
    diag: &BeamDiagonalization,
    side: EndpointSide,
) -> Result<(Mat6, Mat6, Mat6, Vec6), DiagError> {
    let x = match side {
        EndpointSide::Start => 0.0,
        EndpointSide::End => beam.length,
    };
    let p = diag.at_side(side);
    let rbar = beam.block_rotation_at(x);
    let c_sqrt = spd_power(&p.flex, SpdPower::Sqrt)?;
    let c_inv_sqrt = spd_power(&p.flex, SpdPower::InvSqrt)?;
    let gamma = rbar * c_sqrt * p.u.transpose();
    let gamma_inv = p.u * c_inv_sqrt * rbar.transpose();
    let d_inv = Mat6::from_diagonal(&p.d.map(|s| 1.0 / s));
    let sigma =
        (rbar * c_inv_sqrt * p.u.transpose() * d_inv * p.u * c_inv_sqrt * rbar.transpose())
            .symmetric_part();
    Ok((gamma, gamma_inv, sigma, p.d))
}

/// Assembles the coupling matrices and the reflection matrix at every node.
pub fn build_nodal_coupling(
    scenario: &NetworkScenario,
    diags: &[BeamDiagonalization],
) -> Result<Vec<NodeCoupling>, DiagError> {
    if diags.len() != scenario.beams.len() {
        return Err(DiagError::GridMismatch("one diagonalization per beam required".into()));
    }
    let topo = &scenario.topology;
    let mut couplings = Vec::with_capacity(topo.node_count());
    for n in 0..topo.node_count() {
        // slots: ending beam (or beam 1 at node 0), then starting beams
        let mut slots: Vec<(usize, EndpointSide)> = Vec::new();
        if n == 0 {
            slots.push((1, EndpointSide::Start));
        } else {
            slots.push((n, EndpointSide::End));
        }
        if n > 0 {
            for i in topo.outgoing(n) {
                slots.push((i, EndpointSide::Start));
            }
        }
        let is_multiple = !topo.is_simple(n);

        let mut gammas = Vec::new();
        let mut gamma_invs = Vec::new();
        let mut sigmas = Vec::new();
        let mut dbars: Vec<Vec6> = Vec::new();
        let mut edges = Vec::new();
        for &(edge, side) in &slots {
            let (gamma, gamma_inv, sigma, d) =
                slot_data(&scenario.beams[edge - 1], &diags[edge - 1], side)?;
            gammas.push(gamma);
            gamma_invs.push(gamma_inv);
            sigmas.push(sigma);
            dbars.push(d);
            edges.push(edge);
        }

        let condition = scenario.conditions[n].clone();
        let anchor_beam = &scenario.beams[edges[0] - 1];
        let anchor_x = if n == 0 { 0.0 } else { anchor_beam.length };
        let rbar = anchor_beam.block_rotation_at(anchor_x);
        let kbar = (rbar * condition.gain() * rbar.transpose()).symmetric_part();
        let sigma_sum = sigmas.iter().fold(Mat6::zeros(), |acc, s| acc + s);

        let (alpha, beta) = if is_multiple {
            let k = slots.len();
            let mut alpha = DMatrix::zeros(6, 6 * k);
            let mut beta = DMatrix::zeros(6, 6 * k);
            for (s, (sigma, gamma)) in sigmas.iter().zip(&gammas).enumerate() {
                let base = sigma * gamma;
                let (ablock, bblock) = if s == 0 {
                    (((sigmas[0] + kbar) * gammas[0]), ((sigmas[0] - kbar) * gammas[0]))
                } else {
                    (base, base)
                };
                for i in 0..6 {
                    for j in 0..6 {
                        alpha[(i, 6 * s + j)] = ablock[(i, j)];
                        beta[(i, 6 * s + j)] = bblock[(i, j)];
                    }
                }
            }
            (Some(alpha), Some(beta))
        } else {
            (None, None)
        };

        let reflection = reflection_matrix(
            n,
            is_multiple,
            &condition,
            &gammas,
            &gamma_invs,
            &sigmas,
            &kbar,
            &sigma_sum,
        )?;

        couplings.push(NodeCoupling {
            node: n,
            edges,
            condition,
            is_multiple,
            gammas,
            gamma_invs,
            sigmas,
            kbar,
            sigma_sum,
            dbars,
            alpha,
            beta,
            reflection,
        });
    }
    Ok(couplings)
}

#[allow(clippy::too_many_arguments)]
fn reflection_matrix(
    node: usize,
    is_multiple: bool,
    condition: &NodeCondition,
    gammas: &[Mat6],
    gamma_invs: &[Mat6],
    sigmas: &[Mat6],
    kbar: &Mat6,
    sigma_sum: &Mat6,
) -> Result<DMatrix<f64>, DiagError> {
    if !is_multiple {
        let b6: Mat6 = match condition {
            NodeCondition::Free => Mat6::identity(),
            NodeCondition::Clamped => -Mat6::identity(),
            NodeCondition::Feedback(_) => {
                let lhs = (sigmas[0] + kbar) * gammas[0];
                let rhs = (sigmas[0] - kbar) * gammas[0];
                lhs.lu()
                    .solve(&rhs)
                    .ok_or(DiagError::SingularSystem { node })?
            }
        };
        return Ok(DMatrix::from_fn(6, 6, |i, j| b6[(i, j)]));
    }
    // multiple node: 2 G^-1 diag(sigma_sum + kbar)^-1 (ones) diag(sigma_i) G - I
    let k = gammas.len();
    let t = spd_power(&(sigma_sum + kbar).symmetric_part(), SpdPower::Inv)?;
    let mut out = DMatrix::zeros(6 * k, 6 * k);
    for p in 0..k {
        for q in 0..k {
            let mut block: Mat6 = gamma_invs[p] * (2.0 * t) * sigmas[q] * gammas[q];
            if p == q {
                block -= Mat6::identity();
            }
            for i in 0..6 {
                for j in 0..6 {
                    out[(6 * p + i, 6 * q + j)] = block[(i, j)];
                }
            }
        }
    }
    Ok(out)
}

/// Applies the nodal conditions: outgoing information from incoming.
pub fn apply_reflection(coupling: &NodeCoupling, r_in: &DVector<f64>) -> DVector<f64> {
    &coupling.reflection * r_in
}

/// Independent oracle for multiple nodes: solves the raw continuity/balance
/// system by a dense LU factorization instead of the closed form.
pub fn solve_nodal_oracle(
    coupling: &NodeCoupling,
    r_in: &DVector<f64>,
) -> Result<DVector<f64>, DiagError> {
    if !coupling.is_multiple {
        return Err(DiagError::Invalid("oracle solve is defined at multiple nodes".into()));
    }
    let k = coupling.k();
    let dim = 6 * k;
    if r_in.len() != dim {
        return Err(DiagError::GridMismatch(format!(
            "incoming vector has length {}, expected {dim}",
            r_in.len()
        )));
    }
    // lhs = [[sigma_0 + kbar, sigma_2 .. sigma_k], [-I, I, 0..], ...]
    // rhs = [[sigma_0 - kbar, sigma_2 .. sigma_k], [ I, -I, 0..], ...]
    let mut lhs = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(dim, dim);
    let write =
        |m: &mut DMatrix<f64>, bi: usize, bj: usize, block: &Mat6| {
            for i in 0..6 {
                for j in 0..6 {
                    m[(6 * bi + i, 6 * bj + j)] = block[(i, j)];
                }
            }
        };
    let a0 = (coupling.sigmas[0] + coupling.kbar).symmetric_part();
    let d0 = (coupling.sigmas[0] - coupling.kbar).symmetric_part();
    write(&mut lhs, 0, 0, &a0);
    write(&mut rhs, 0, 0, &d0);
    for q in 1..k {
        write(&mut lhs, 0, q, &coupling.sigmas[q]);
        write(&mut rhs, 0, q, &coupling.sigmas[q]);
        write(&mut lhs, q, 0, &(-Mat6::identity()));
        write(&mut lhs, q, q, &Mat6::identity());
        write(&mut rhs, q, 0, &Mat6::identity());
        write(&mut rhs, q, q, &(-Mat6::identity()));
    }
    // block-diagonal gamma factors on both sides
    let mut g = DMatrix::zeros(dim, dim);
    for (s, gamma) in coupling.gammas.iter().enumerate() {
        write(&mut g, s, s, gamma);
    }
    let big_lhs = &lhs * &g;
    let big_rhs = &rhs * &g * r_in;
    big_lhs
        .lu()
        .solve(&big_rhs)
        .ok_or(DiagError::SingularSystem { node: coupling.node })
}

/// Feedback gain that silences the outgoing information at a simple node:
/// `K = C^-1/2 (C^1/2 M C^1/2)^1/2 C^-1/2` at the endpoint.
pub fn transparent_gain(params: &BeamParams, side: EndpointSide) -> Result<Mat6, DiagError> {
    let x = match side {
        EndpointSide::Start => 0.0,
        EndpointSide::End => params.length,
    };
    let c = params.flexibility_at(x);
    let m = params.mass_at(x);
    let c_sqrt = spd_power(&c, SpdPower::Sqrt)?;
    let c_inv_sqrt = spd_power(&c, SpdPower::InvSqrt)?;
    let inner = spd_power(&(c_sqrt * m * c_sqrt).symmetric_part(), SpdPower::Sqrt)?;
    Ok((c_inv_sqrt * inner * c_inv_sqrt).symmetric_part())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::ParamField;
    use crate::grid::uniform_grid;
    use crate::linalg::{self, Mat3, Vec3};
    use crate::network::{InitialDatum, NetworkTopology};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(rng: &mut StdRng) -> Mat6 {
        let a = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let q = a.qr().q();
        let d = Vec6::from_fn(|_, _| rng.random_range(0.5..2.0));
        (q * Mat6::from_diagonal(&d) * q.transpose()).symmetric_part()
    }

    fn random_beam(rng: &mut StdRng) -> BeamParams {
        BeamParams {
            mass: ParamField::Constant(random_spd(rng)),
            flexibility: ParamField::Constant(random_spd(rng)),
            ..BeamParams::unit(1.0)
        }
    }

    fn diag_norm(m: &Mat12, speeds: &Vec12) -> f64 {
        let mut expected = Mat12::zeros();
        for i in 0..12 {
            expected[(i, i)] = speeds[i];
        }
        (m - expected).norm()
    }

    #[test]
    fn theta_identity_and_diagonal_algebra() {
        let beam = BeamParams::unit(1.0);
        assert_relative_eq!(compute_theta(&beam, 0.5).unwrap(), Mat6::identity(), epsilon = 1e-13);

        // block-diagonal commuting case: Theta = diag(1/(mc) I3, 1/(jd) I3)
        let (m, j, c, d) = (2.0, 3.0, 0.5, 4.0);
        let mut mass = Mat6::identity();
        let mut flex = Mat6::identity();
        for i in 0..3 {
            mass[(i, i)] = m;
            mass[(i + 3, i + 3)] = j;
            flex[(i, i)] = c;
            flex[(i + 3, i + 3)] = d;
        }
        let beam = BeamParams {
            mass: ParamField::Constant(mass),
            flexibility: ParamField::Constant(flex),
            ..BeamParams::unit(1.0)
        };
        let theta = compute_theta(&beam, 0.0).unwrap();
        let mut expected = Mat6::identity();
        for i in 0..3 {
            expected[(i, i)] = 1.0 / (m * c);
            expected[(i + 3, i + 3)] = 1.0 / (j * d);
        }
        assert_relative_eq!(theta, expected, epsilon = 1e-12);
    }

    #[test]
    fn theta_shares_eigenvalues_with_product_inverse() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..10 {
            let beam = random_beam(&mut rng);
            let theta = compute_theta(&beam, 0.3).unwrap();
            let prod_inv = spd_power(&beam.flexibility_at(0.3), SpdPower::Inv).unwrap()
                * spd_power(&beam.mass_at(0.3), SpdPower::Inv).unwrap();
            let mut theta_eigs: Vec<f64> =
                sym_eig6(&theta).unwrap().values.iter().cloned().collect();
            let mut prod_eigs: Vec<f64> =
                prod_inv.complex_eigenvalues().iter().map(|e| e.re).collect();
            theta_eigs.sort_by(f64::total_cmp);
            prod_eigs.sort_by(f64::total_cmp);
            for (a, b) in theta_eigs.iter().zip(&prod_eigs) {
                assert_relative_eq!(a, b, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn unit_beam_diagonalization_closed_form() {
        let beam = BeamParams::unit(1.0);
        let diag = build_diagonalization(&beam, &uniform_grid(1.0, 4)).unwrap();
        let p = diag.start();
        assert_relative_eq!(p.d, Vec6::repeat(1.0), epsilon = 1e-13);
        assert_relative_eq!(p.u, Mat6::identity(), epsilon = 1e-13);
        let mut l_expected = Mat12::zeros();
        let i6 = Mat6::identity();
        l_expected.fixed_view_mut::<6, 6>(0, 0).copy_from(&i6);
        l_expected.fixed_view_mut::<6, 6>(0, 6).copy_from(&i6);
        l_expected.fixed_view_mut::<6, 6>(6, 0).copy_from(&i6);
        l_expected.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-i6));
        assert_relative_eq!(p.l, l_expected, epsilon = 1e-13);
        assert_relative_eq!(p.l_inv, l_expected * 0.5, epsilon = 1e-13);
        assert_relative_eq!(p.l * p.l_inv, Mat12::identity(), epsilon = 1e-13);
    }

    #[test]
    fn diagonalization_identity_for_random_constant_fields() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let beam = random_beam(&mut rng);
            let diag = build_diagonalization(&beam, &uniform_grid(1.0, 2)).unwrap();
            let p = diag.start();
            let residual = diag_norm(&(p.l * p.a_phys * p.l_inv), &p.speeds);
            assert!(residual <= 1e-9, "residual {residual}");
            // constant parameters: lower order is exactly L B L^-1
            assert_relative_eq!(p.b, p.l * p.b_phys * p.l_inv, epsilon = 1e-13);
        }
    }

    #[test]
    fn varying_field_lower_order_matches_analytic_derivative() {
        // linear-in-x diagonal flexibility with well-separated entries
        let entries = [1.0, 2.0, 3.0, 4.5, 6.0, 8.0];
        let make_flex = |x: f64| {
            let mut c = Mat6::zeros();
            for (i, e) in entries.iter().enumerate() {
                c[(i, i)] = e * (1.0 + 0.2 * x);
            }
            c
        };
        let mut errs = Vec::new();
        for cells in [32usize, 64] {
            let xs = uniform_grid(1.0, cells);
            let beam = BeamParams {
                flexibility: ParamField::Sampled {
                    xs: xs.clone(),
                    values: xs.iter().map(|&x| make_flex(x)).collect(),
                },
                ..BeamParams::unit(1.0)
            };
            let diag = build_diagonalization(&beam, &xs).unwrap();
            // analytic: Theta = C^-1 diagonal, D = C^-1/2 entries descending-orderable,
            // L^-1 blocks = [C^1/2 P^T /2 ...]; differentiate entrywise.
            let mut max_err = 0.0f64;
            for (j, &x) in xs.iter().enumerate() {
                let c = make_flex(x);
                let dc = Mat6::from_fn(|i, k| if i == k { entries[i] * 0.2 } else { 0.0 });
                // d = sqrt(1/c_i) ascending = reverse order of c entries
                let p = &diag.points[j];
                // analytic dL^-1/dx in the same ordering as the built one:
                // L^-1 = 1/2 [[C^1/2 U^T, C^1/2 U^T], [C^-1/2 U^T D^-1, -C^-1/2 U^T D^-1]]
                let u = p.u;
                let c_sqrt_d = Mat6::from_fn(|i, k| {
                    if i == k { 0.5 * dc[(i, i)] / c[(i, i)].sqrt() } else { 0.0 }
                });
                let c_inv_sqrt_d = Mat6::from_fn(|i, k| {
                    if i == k { -0.5 * dc[(i, i)] * c[(i, i)].powf(-1.5) } else { 0.0 }
                });
                // D = diag over permuted entries: D^2 = U Theta U^T with Theta = C^-1
                // dD^-1/dx: D^-1 = U C^1/2 U^T (diagonal up to permutation)
                let dinv_d = u * c_sqrt_d * u.transpose();
                let top = c_sqrt_d * u.transpose();
                let bot = c_inv_sqrt_d * u.transpose() * Mat6::from_diagonal(&p.d.map(|s| 1.0 / s))
                    + spd_power(&c, SpdPower::InvSqrt).unwrap() * u.transpose() * dinv_d;
                let mut dlinv = Mat12::zeros();
                dlinv.fixed_view_mut::<6, 6>(0, 0).copy_from(&(0.5 * top));
                dlinv.fixed_view_mut::<6, 6>(0, 6).copy_from(&(0.5 * top));
                dlinv.fixed_view_mut::<6, 6>(6, 0).copy_from(&(0.5 * bot));
                dlinv.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-0.5 * bot));
                let b_analytic = p.l * p.b_phys * p.l_inv + p.l * p.a_phys * dlinv;
                max_err = max_err.max((p.b - b_analytic).norm());
            }
            errs.push(max_err);
        }
        assert!(errs[1] <= errs[0] / 3.0, "errors {errs:?}");
    }

    #[test]
    fn crossing_eigenvalues_are_rejected() {
        // two flexibility entries trade places along the beam
        let xs = uniform_grid(1.0, 8);
        let values: Vec<Mat6> = xs
            .iter()
            .map(|&x| {
                let mut c = Mat6::identity();
                c[(0, 0)] = 1.0 + x;
                c[(1, 1)] = 2.0 - x;
                c
            })
            .collect();
        let beam = BeamParams {
            flexibility: ParamField::Sampled { xs: xs.clone(), values },
            ..BeamParams::unit(1.0)
        };
        match build_diagonalization(&beam, &xs) {
            Err(DiagError::EigenvalueCrossing { .. }) => {}
            other => panic!("expected crossing rejection, got {other:?}"),
        }
    }

    #[test]
    fn riemann_round_trip_and_unit_split() {
        let beam = BeamParams::unit(1.0);
        let diags = vec![build_diagonalization(&beam, &uniform_grid(1.0, 8)).unwrap()];
        let mut rng = StdRng::seed_from_u64(29);
        let mut phys = PhysState::zeros(&[9]);
        for y in &mut phys.per_beam[0] {
            *y = Vec12::from_fn(|_, _| rng.random_range(-1.0..1.0));
        }
        let r = riemann_forward(&diags, &phys).unwrap();
        // unit beam: r- = v + z, r+ = v - z
        for (y, rv) in phys.per_beam[0].iter().zip(&r.per_beam[0]) {
            let v = y.fixed_rows::<6>(0);
            let z = y.fixed_rows::<6>(6);
            assert_relative_eq!(rv.fixed_rows::<6>(0).into_owned(), (v + z).into_owned(), epsilon = 1e-13);
            assert_relative_eq!(rv.fixed_rows::<6>(6).into_owned(), (v - z).into_owned(), epsilon = 1e-13);
        }
        let back = riemann_inverse(&diags, &r).unwrap();
        for (a, b) in phys.per_beam[0].iter().zip(&back.per_beam[0]) {
            assert!((a - b).norm() <= 1e-10);
        }
        // zero maps to zero
        let zero = PhysState::zeros(&[9]);
        assert_eq!(riemann_forward(&diags, &zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn riemann_split_formula_with_consistent_middle_factor() {
        // r± = U C^-1/2 (v ± C^1/2 (C^1/2 M C^1/2)^-1/2 C^1/2 z)
        let mut rng = StdRng::seed_from_u64(31);
        let beam = random_beam(&mut rng);
        let diags = vec![build_diagonalization(&beam, &uniform_grid(1.0, 2)).unwrap()];
        let p = diags[0].start();
        let c = beam.flexibility_at(0.0);
        let m = beam.mass_at(0.0);
        let c_sqrt = spd_power(&c, SpdPower::Sqrt).unwrap();
        let c_inv_sqrt = spd_power(&c, SpdPower::InvSqrt).unwrap();
        let mid = c_sqrt
            * spd_power(&(c_sqrt * m * c_sqrt).symmetric_part(), SpdPower::InvSqrt).unwrap()
            * c_sqrt;
        let y = Vec12::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let v = y.fixed_rows::<6>(0).into_owned();
        let z = y.fixed_rows::<6>(6).into_owned();
        let r = p.l * y;
        assert_relative_eq!(
            r.fixed_rows::<6>(0).into_owned(),
            p.u * c_inv_sqrt * (v + mid * z),
            epsilon = 1e-10
        );
        assert_relative_eq!(
            r.fixed_rows::<6>(6).into_owned(),
            p.u * c_inv_sqrt * (v - mid * z),
            epsilon = 1e-10
        );
    }

    fn star_scenario(n: usize, gain: Option<Mat6>) -> NetworkScenario {
        let topo = NetworkTopology::star(n);
        let mut conditions = vec![NodeCondition::Free; topo.node_count()];
        for node in topo.simple_nodes() {
            conditions[node] = match gain {
                Some(k) => NodeCondition::Feedback(k),
                None => NodeCondition::Free,
            };
        }
        NetworkScenario {
            beams: (0..n).map(|_| BeamParams::unit(1.0)).collect(),
            topology: topo,
            conditions,
            initial: InitialDatum::Zero,
        }
    }

    fn couplings_for(scenario: &NetworkScenario) -> Vec<NodeCoupling> {
        let diags: Vec<BeamDiagonalization> = scenario
            .beams
            .iter()
            .map(|b| build_diagonalization(b, &uniform_grid(b.length, 4)).unwrap())
            .collect();
        build_nodal_coupling(scenario, &diags).unwrap()
    }

    #[test]
    fn unit_star_coupling_values() {
        let scenario = star_scenario(3, Some(Mat6::identity()));
        let couplings = couplings_for(&scenario);
        // unit beams: gamma = sigma = I at every slot
        for c in &couplings {
            for (g, s) in c.gammas.iter().zip(&c.sigmas) {
                assert_relative_eq!(*g, Mat6::identity(), epsilon = 1e-12);
                assert_relative_eq!(*s, Mat6::identity(), epsilon = 1e-12);
            }
        }
        // K = I is the transparent gain for unit beams: no outgoing info
        for n in [0usize, 2, 3] {
            assert!(linalg::op_norm_dyn(&couplings[n].reflection) <= 1e-10);
        }
        // interior free node with three identical beams: (2/3) ones - I
        let b1 = &couplings[1].reflection;
        for p in 0..3 {
            for q in 0..3 {
                let expect = if p == q { -1.0 / 3.0 } else { 2.0 / 3.0 };
                for i in 0..6 {
                    for j in 0..6 {
                        let want = if i == j { expect } else { 0.0 };
                        assert_relative_eq!(b1[(6 * p + i, 6 * q + j)], want, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn serial_unit_junction_is_pure_transmission() {
        let scenario = NetworkScenario {
            topology: NetworkTopology::new(vec![0, 1]),
            beams: vec![BeamParams::unit(1.0), BeamParams::unit(1.0)],
            conditions: vec![NodeCondition::Free, NodeCondition::Free, NodeCondition::Free],
            initial: InitialDatum::Zero,
        };
        let couplings = couplings_for(&scenario);
        let b = &couplings[1].reflection;
        for p in 0..2 {
            for q in 0..2 {
                for i in 0..6 {
                    for j in 0..6 {
                        let want = if p != q && i == j { 1.0 } else { 0.0 };
                        assert_relative_eq!(b[(6 * p + i, 6 * q + j)], want, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn free_and_clamped_reflections_are_signed_identities() {
        let mut scenario = star_scenario(1, None);
        scenario.conditions[1] = NodeCondition::Clamped;
        let couplings = couplings_for(&scenario);
        assert_eq!(couplings[0].reflection, DMatrix::identity(6, 6));
        assert_eq!(couplings[1].reflection, -DMatrix::identity(6, 6));
    }

    #[test]
    fn balance_rows_differ_only_in_the_gain_column() {
        let mut rng = StdRng::seed_from_u64(37);
        let k_gain = random_spd(&mut rng);
        let mut scenario = star_scenario(3, Some(random_spd(&mut rng)));
        scenario.beams = (0..3).map(|_| random_beam(&mut rng)).collect();
        scenario.conditions[1] = NodeCondition::Feedback(k_gain);
        let couplings = couplings_for(&scenario);
        let c = &couplings[1];
        let alpha = c.alpha.as_ref().unwrap();
        let beta = c.beta.as_ref().unwrap();
        let diff = alpha - beta;
        let expected = 2.0 * c.kbar * c.gammas[0];
        for i in 0..6 {
            for j in 0..18 {
                let want = if j < 6 { expected[(i, j)] } else { 0.0 };
                assert_relative_eq!(diff[(i, j)], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn closed_form_reflection_matches_oracle() {
        let mut rng = StdRng::seed_from_u64(41);
        for k_n in [2usize, 3, 4] {
            for gain in [None, Some(random_spd(&mut rng))] {
                let mut scenario = star_scenario(k_n, Some(Mat6::identity()));
                scenario.beams = (0..k_n).map(|_| random_beam(&mut rng)).collect();
                scenario.conditions[1] = match gain {
                    Some(k) => NodeCondition::Feedback(k),
                    None => NodeCondition::Free,
                };
                if k_n >= 2 {
                    let couplings = couplings_for(&scenario);
                    let c = &couplings[1];
                    for _ in 0..20 {
                        let r_in =
                            DVector::from_fn(6 * c.k(), |_, _| rng.random_range(-1.0..1.0));
                        let direct = apply_reflection(c, &r_in);
                        let oracle = solve_nodal_oracle(c, &r_in).unwrap();
                        assert!((direct - oracle).amax() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn reflected_states_satisfy_physical_nodal_conditions() {
        // closing the loop: r_out = B r_in reconstructs states that satisfy
        // the continuity and balance conditions in physical variables.
        let mut rng = StdRng::seed_from_u64(43);
        let mut scenario = star_scenario(3, Some(random_spd(&mut rng)));
        scenario.beams = (0..3).map(|_| random_beam(&mut rng)).collect();
        for (i, b) in scenario.beams.iter_mut().enumerate() {
            b.rotation = crate::beam::RotationField::Helical {
                base: Mat3::from(nalgebra::Rotation3::from_axis_angle(
                    &Vec3::y_axis(),
                    0.3 * (i as f64 + 1.0),
                )),
                curvature: Vec3::new(0.1, -0.2, 0.3 * i as f64),
            };
        }
        let diags: Vec<BeamDiagonalization> = scenario
            .beams
            .iter()
            .map(|b| build_diagonalization(b, &uniform_grid(b.length, 4)).unwrap())
            .collect();
        let couplings = build_nodal_coupling(&scenario, &diags).unwrap();
        let c = &couplings[1];
        let r_in = DVector::from_fn(18, |_, _| rng.random_range(-1.0..1.0));
        let r_out = apply_reflection(c, &r_in);
        // slot 0 = ending beam 1 at x = l, slots 1, 2 = beams 2, 3 at x = 0
        let mut ys = Vec::new();
        for (s, edge) in c.edges.iter().enumerate() {
            let mut r_full = Vec12::zeros();
            if s == 0 {
                for i in 0..6 {
                    r_full[i] = r_out[i]; // outgoing r- at the end
                    r_full[6 + i] = r_in[i]; // incoming r+
                }
                ys.push(diags[edge - 1].end().l_inv * r_full);
            } else {
                for i in 0..6 {
                    r_full[i] = r_in[6 * s + i]; // incoming r- at the start
                    r_full[6 + i] = r_out[6 * s + i]; // outgoing r+
                }
                ys.push(diags[edge - 1].start().l_inv * r_full);
            }
        }
        let rbar_end = scenario.beams[0].block_rotation_at(scenario.beams[0].length);
        let v_end = rbar_end * ys[0].fixed_rows::<6>(0).into_owned();
        let z_end = rbar_end * ys[0].fixed_rows::<6>(6).into_owned();
        let mut balance = z_end + c.kbar * v_end;
        for (s, edge) in c.edges.iter().enumerate().skip(1) {
            let rbar = scenario.beams[edge - 1].block_rotation_at(0.0);
            let v = rbar * ys[s].fixed_rows::<6>(0).into_owned();
            let z = rbar * ys[s].fixed_rows::<6>(6).into_owned();
            assert!((v - v_end).norm() <= 1e-9, "continuity violated");
            balance -= z;
        }
        assert!(balance.norm() <= 1e-9, "balance violated: {}", balance.norm());
    }

    #[test]
    fn transparent_gain_properties() {
        let beam = BeamParams::unit(1.0);
        assert_relative_eq!(
            transparent_gain(&beam, EndpointSide::End).unwrap(),
            Mat6::identity(),
            epsilon = 1e-12
        );
        let mut rng = StdRng::seed_from_u64(47);
        for _ in 0..10 {
            let beam = random_beam(&mut rng);
            let k = transparent_gain(&beam, EndpointSide::End).unwrap();
            let scenario = NetworkScenario {
                topology: NetworkTopology::single_edge(),
                conditions: vec![NodeCondition::Free, NodeCondition::Feedback(k)],
                beams: vec![beam],
                initial: InitialDatum::Zero,
            };
            let couplings = couplings_for(&scenario);
            // kbar equals the impedance factor, so the reflection vanishes
            assert!((couplings[1].kbar - couplings[1].sigmas[0]).norm() <= 1e-10);
            assert!(linalg::op_norm_dyn(&couplings[1].reflection) <= 1e-10);
        }
    }

    #[test]
    fn feedback_hardening_shrinks_velocity_transmission() {
        // as the gain grows the controlled end approaches a clamped end:
        // reflection tends to -I, so |B + I| decreases monotonically-ish.
        let mut rng = StdRng::seed_from_u64(53);
        let beam = random_beam(&mut rng);
        let mut prev = f64::INFINITY;
        for scale in [0.5, 2.0, 8.0, 32.0, 128.0] {
            let scenario = NetworkScenario {
                topology: NetworkTopology::single_edge(),
                conditions: vec![
                    NodeCondition::Free,
                    NodeCondition::Feedback(Mat6::identity() * scale),
                ],
                beams: vec![beam.clone()],
                initial: InitialDatum::Zero,
            };
            let couplings = couplings_for(&scenario);
            let b = &couplings[1].reflection;
            let gap = linalg::op_norm_dyn(&(b + DMatrix::identity(6, 6)));
            assert!(gap < prev, "gap {gap} did not shrink (prev {prev})");
            prev = gap;
        }
    }
}
