//! Construction and verification of the quadratic Lyapunov certificate.
//!
//! The candidate weight is `Qbar = rho diag(M, C) + w(x) [[0, W], [W^T, 0]]`
//! per beam, with an exponential weight function `w` per beam and one of
//! three admissible coupling matrices `W`. The certificate grid-checks, with
//! eigenvalue margins: positivity of `Qbar`, symmetry of `Qbar A`, negative
//! definiteness of the dissipation matrix
//! `S = d/dx(Qbar A) - Qbar B - B^T Qbar`, and nonpositivity of the boundary
//! form at every node. The reported decay rate is the linearized one; the
//! simulator cross-checks it on small-amplitude runs.
//!
//! All pointwise properties are verified on a dyadic grid (default 257
//! points per beam) and every inequality carries its measured margin, so the
//! verdict quantifies its own trust.

use crate::beam::{self, BeamParams, PhysState};
use crate::diag::{DiagError, NodeCoupling, PointDiag};
use crate::grid::{fd_derivative, trapezoid, uniform_grid};
use crate::linalg::{
    self, definiteness_dyn, spd_power, sym_eig6, DefinitenessReport, LinalgError, Mat6, Mat12,
    SpdPower,
};
use crate::network::{NetworkError, NetworkScenario, NodeCondition};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Beam(#[from] beam::BeamError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("inadmissible weight endpoints: {0}")]
    BadEndpoints(String),
    #[error("weight constraints are infeasible: {0}")]
    InfeasibleWeights(String),
    #[error("{0}")]
    Invalid(String),
}

/// The three admissible extradiagonal couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WChoice {
    /// `W = I`
    Identity,
    /// `W = M C`
    MassFlex,
    /// `W = C^-1/2 (C^1/2 M C^1/2)^1/2 C^1/2`; reduces to `M^1/2 C^1/2` for
    /// commuting factors and makes the positivity constant equal to one.
    SqrtMassFlex,
}

/// Extradiagonal coupling matrix at a point.
pub fn build_w(params: &BeamParams, choice: WChoice, x: f64) -> Result<Mat6, CertifyError> {
    let m = params.mass_at(x);
    let c = params.flexibility_at(x);
    Ok(match choice {
        WChoice::Identity => Mat6::identity(),
        WChoice::MassFlex => m * c,
        WChoice::SqrtMassFlex => {
            let c_sqrt = spd_power(&c, SpdPower::Sqrt)?;
            let c_inv_sqrt = spd_power(&c, SpdPower::InvSqrt)?;
            let inner = spd_power(&(c_sqrt * m * c_sqrt).symmetric_part(), SpdPower::Sqrt)?;
            c_inv_sqrt * inner * c_sqrt
        }
    })
}

/// The two diagonal blocks `W C^-1` and `W^T M^-1` of the leading part of
/// the dissipation matrix; both must be symmetric positive definite.
pub fn lambda_pair(
    params: &BeamParams,
    choice: WChoice,
    x: f64,
) -> Result<(Mat6, Mat6), CertifyError> {
    let w = build_w(params, choice, x)?;
    let c_inv = spd_power(&params.flexibility_at(x), SpdPower::Inv)?;
    let m_inv = spd_power(&params.mass_at(x), SpdPower::Inv)?;
    let l1 = (w * c_inv).symmetric_part();
    let l2 = (w.transpose() * m_inv).symmetric_part();
    for (name, l) in [("W C^-1", &l1), ("W^T M^-1", &l2)] {
        let min = linalg::min_eig(l);
        if min <= 0.0 {
            return Err(CertifyError::Invalid(format!(
                "{name} is not positive definite (min eigenvalue {min:.3e})"
            )));
        }
    }
    Ok((l1, l2))
}

/// Positivity constant `theta = M^-1/2 W C^-1 W^T M^-1/2`; its largest
/// eigenvalue bounds how much extradiagonal weight the ansatz tolerates.
pub fn positivity_matrix(
    params: &BeamParams,
    choice: WChoice,
    x: f64,
) -> Result<Mat6, CertifyError> {
    let w = build_w(params, choice, x)?;
    let m_inv_sqrt = spd_power(&params.mass_at(x), SpdPower::InvSqrt)?;
    let c_inv = spd_power(&params.flexibility_at(x), SpdPower::Inv)?;
    Ok((m_inv_sqrt * w * c_inv * w.transpose() * m_inv_sqrt).symmetric_part())
}

/// Weight function families: exponentially shaped, increasing, single-signed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightFamily {
    /// `w == 0` (degenerate ansatz, the weight drops out).
    Zero,
    /// Nonpositive branch `q(x) = e^{-eta x}(a - b + eps x) + b`,
    /// `eps = (b - a)/l`, shifted by `q(l) = b`; requires `a < b <= 0`.
    NonpositiveExp,
    /// Nonnegative branch `q(x) = a + eps x e^{eta x}`,
    /// `eps = e^{-eta l}(b - a)/l`, shifted by `q(0) = a`; requires
    /// `0 <= a < b`.
    NonnegativeExp,
}

/// An increasing scalar weight on `[0, length]` with a strict differential
/// inequality margin `dq/dx - eta * (target difference) = eps e^{-+eta x}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFunction {
    pub family: WeightFamily,
    pub a: f64,
    pub b: f64,
    pub eta: f64,
    pub length: f64,
}

impl WeightFunction {
    pub fn zero(length: f64) -> Self {
        WeightFunction { family: WeightFamily::Zero, a: 0.0, b: 0.0, eta: 0.0, length }
    }

    pub fn nonpositive_exp(a: f64, b: f64, eta: f64, length: f64) -> Result<Self, CertifyError> {
        if !(a < b && b <= 0.0) {
            return Err(CertifyError::BadEndpoints(format!(
                "nonpositive branch needs a < b <= 0, got a = {a}, b = {b}"
            )));
        }
        if !(eta > 0.0 && length > 0.0) {
            return Err(CertifyError::BadEndpoints("eta and length must be positive".into()));
        }
        Ok(WeightFunction { family: WeightFamily::NonpositiveExp, a, b, eta, length })
    }

    pub fn nonnegative_exp(a: f64, b: f64, eta: f64, length: f64) -> Result<Self, CertifyError> {
        if !(0.0 <= a && a < b) {
            return Err(CertifyError::BadEndpoints(format!(
                "nonnegative branch needs 0 <= a < b, got a = {a}, b = {b}"
            )));
        }
        if !(eta > 0.0 && length > 0.0) {
            return Err(CertifyError::BadEndpoints("eta and length must be positive".into()));
        }
        Ok(WeightFunction { family: WeightFamily::NonnegativeExp, a, b, eta, length })
    }

    fn eps(&self) -> f64 {
        match self.family {
            WeightFamily::Zero => 0.0,
            WeightFamily::NonpositiveExp => (self.b - self.a) / self.length,
            WeightFamily::NonnegativeExp => {
                (-self.eta * self.length).exp() * (self.b - self.a) / self.length
            }
        }
    }

    /// Unshifted profile with `q(0) = a`, `q(length) = b`.
    pub fn q(&self, x: f64) -> f64 {
        match self.family {
            WeightFamily::Zero => 0.0,
            WeightFamily::NonpositiveExp => {
                (-self.eta * x).exp() * (self.a - self.b + self.eps() * x) + self.b
            }
            WeightFamily::NonnegativeExp => self.a + self.eps() * x * (self.eta * x).exp(),
        }
    }

    pub fn dq(&self, x: f64) -> f64 {
        match self.family {
            WeightFamily::Zero => 0.0,
            WeightFamily::NonpositiveExp => {
                let e = (-self.eta * x).exp();
                e * (self.eps() - self.eta * (self.a - self.b + self.eps() * x))
            }
            WeightFamily::NonnegativeExp => {
                self.eps() * (self.eta * x).exp() * (1.0 + self.eta * x)
            }
        }
    }

    /// Margin of the strict differential inequality; positive everywhere for
    /// admissible endpoints.
    pub fn inequality_margin(&self, x: f64) -> f64 {
        match self.family {
            WeightFamily::Zero => 0.0,
            WeightFamily::NonpositiveExp => self.dq(x) - self.eta * (self.b - self.q(x)),
            WeightFamily::NonnegativeExp => self.dq(x) - self.eta * (self.q(x) - self.a),
        }
    }

    /// Shifted weight: the nonpositive branch vanishes at the far end, the
    /// nonnegative one at the near end, so single-signedness holds on the
    /// whole beam.
    pub fn w(&self, x: f64) -> f64 {
        match self.family {
            WeightFamily::Zero => 0.0,
            WeightFamily::NonpositiveExp => self.q(x) - self.b,
            WeightFamily::NonnegativeExp => self.q(x) - self.a,
        }
    }

    pub fn dw(&self, x: f64) -> f64 {
        self.dq(x)
    }

    /// Fixed sign of the weight on the beam: -1, 0 or +1.
    pub fn sign(&self) -> f64 {
        match self.family {
            WeightFamily::Zero => 0.0,
            WeightFamily::NonpositiveExp => -1.0,
            WeightFamily::NonnegativeExp => 1.0,
        }
    }
}

/// Lyapunov ansatz: one global scale, one coupling choice, one weight per
/// beam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnsatzConfig {
    pub rho: f64,
    pub w_choice: WChoice,
    pub weights: Vec<WeightFunction>,
}

impl AnsatzConfig {
    /// The candidate Lyapunov weight at one point of one beam.
    pub fn q_bar(&self, params: &BeamParams, beam: usize, x: f64) -> Result<Mat12, CertifyError> {
        let w_mat = build_w(params, self.w_choice, x)?;
        let wx = self.weights[beam].w(x);
        let mut q = Mat12::zeros();
        q.fixed_view_mut::<6, 6>(0, 0).copy_from(&(self.rho * params.mass_at(x)));
        q.fixed_view_mut::<6, 6>(6, 6).copy_from(&(self.rho * params.flexibility_at(x)));
        q.fixed_view_mut::<6, 6>(0, 6).copy_from(&(wx * w_mat));
        q.fixed_view_mut::<6, 6>(6, 0).copy_from(&(wx * w_mat.transpose()));
        Ok(q)
    }
}

/// Per-beam grids of everything the pointwise checks need.
pub struct BeamCertGrid {
    pub xs: Vec<f64>,
    pub lambda1: Vec<Mat6>,
    pub lambda2: Vec<Mat6>,
    pub dlambda1: Vec<Mat6>,
    pub dlambda2: Vec<Mat6>,
    pub twist: Vec<Mat6>,
    pub theta_max: f64,
}

/// Evaluates the coupling blocks and their derivatives on a grid; the
/// derivative vanishes identically for constant parameter fields.
pub fn beam_cert_grid(
    params: &BeamParams,
    choice: WChoice,
    points: usize,
) -> Result<BeamCertGrid, CertifyError> {
    let xs = uniform_grid(params.length, points.max(3) - 1);
    let mut lambda1 = Vec::with_capacity(xs.len());
    let mut lambda2 = Vec::with_capacity(xs.len());
    let mut twist = Vec::with_capacity(xs.len());
    let mut theta_max = f64::NEG_INFINITY;
    for &x in &xs {
        let (l1, l2) = lambda_pair(params, choice, x)?;
        lambda1.push(l1);
        lambda2.push(l2);
        twist.push(params.initial_twist(x)?);
        theta_max = theta_max.max(linalg::max_eig(&positivity_matrix(params, choice, x)?));
    }
    let constant = params.mass.is_constant() && params.flexibility.is_constant();
    let (dlambda1, dlambda2) = if constant {
        (vec![Mat6::zeros(); xs.len()], vec![Mat6::zeros(); xs.len()])
    } else {
        (fd_derivative(&xs, &lambda1), fd_derivative(&xs, &lambda2))
    };
    Ok(BeamCertGrid { xs, lambda1, lambda2, dlambda1, dlambda2, twist, theta_max })
}

/// Split assembly of the dissipation matrix at grid index `idx`:
/// `S = -dw/dx Lambda + |w| Xi` with `Lambda = diag(W C^-1, W^T M^-1)` and
/// `Xi` collecting the twist couplings and the derivative of `Lambda`.
pub fn assemble_s_bar(
    grid: &BeamCertGrid,
    weight: &WeightFunction,
    idx: usize,
) -> (Mat12, Mat12, Mat12) {
    let l1 = grid.lambda1[idx];
    let l2 = grid.lambda2[idx];
    let e = grid.twist[idx];
    let x = grid.xs[idx];
    let sign = if weight.sign() == 0.0 { 1.0 } else { weight.sign() };

    let mut lambda = Mat12::zeros();
    lambda.fixed_view_mut::<6, 6>(0, 0).copy_from(&l1);
    lambda.fixed_view_mut::<6, 6>(6, 6).copy_from(&l2);

    let x1 = l1 * e.transpose();
    let x1s = x1 + x1.transpose();
    let x2 = l2 * e;
    let x2s = x2 + x2.transpose();
    let mut xi = Mat12::zeros();
    xi.fixed_view_mut::<6, 6>(0, 0).copy_from(&(sign * (-x1s - grid.dlambda1[idx])));
    xi.fixed_view_mut::<6, 6>(6, 6).copy_from(&(sign * (x2s - grid.dlambda2[idx])));

    let s_bar = -weight.dw(x) * lambda + weight.w(x).abs() * xi;
    (s_bar, lambda, xi)
}

/// Direct assembly of the dissipation matrix from the full products
/// `Qbar A` and `Qbar B`; an independent route that exercises the
/// cancellation of the energy part numerically.
pub fn s_bar_direct(
    params: &BeamParams,
    ansatz: &AnsatzConfig,
    beam: usize,
    grid: &BeamCertGrid,
    idx: usize,
) -> Result<Mat12, CertifyError> {
    let x = grid.xs[idx];
    let weight = &ansatz.weights[beam];
    let q_bar = ansatz.q_bar(params, beam, x)?;
    let b_bar = params.lower_order(x)?;
    // d/dx (Qbar A): the energy part is constant; the extradiagonal part is
    // -(w' Lambda + w dLambda/dx) with the analytic weight derivative.
    let mut d_qa = Mat12::zeros();
    let d_l1 = weight.dw(x) * grid.lambda1[idx] + weight.w(x) * grid.dlambda1[idx];
    let d_l2 = weight.dw(x) * grid.lambda2[idx] + weight.w(x) * grid.dlambda2[idx];
    d_qa.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-d_l1));
    d_qa.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-d_l2));
    let qb = q_bar * b_bar;
    Ok(d_qa - qb - qb.transpose())
}

/// One named inequality with its measured slack. Strict checks require a
/// positive margin; non-strict ones tolerate round-off at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckMargin {
    pub name: String,
    pub margin: f64,
    pub strict: bool,
    pub satisfied: bool,
}

impl CheckMargin {
    fn strict(name: impl Into<String>, margin: f64) -> Self {
        CheckMargin { name: name.into(), margin, strict: true, satisfied: margin > 0.0 }
    }

    fn slack(name: impl Into<String>, margin: f64) -> Self {
        CheckMargin { name: name.into(), margin, strict: false, satisfied: margin >= -1e-12 }
    }
}

/// Scale selection: smallest admissible global scale with 10% headroom, plus
/// the constants that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoReport {
    pub rho: f64,
    pub per_beam: Vec<RhoConstraint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoConstraint {
    pub beam: usize,
    pub c_theta: f64,
    pub c_mu: Option<f64>,
    /// `min(c_theta^-1/2, c_mu^-1)`
    pub beta_coefficient: f64,
    pub required_rho: f64,
}

fn controlled_endpoint(scenario: &NetworkScenario, beam: usize) -> Option<(usize, f64)> {
    // beam 1 meets node 0 at x = 0; beam i meets node i at x = length
    let topo = &scenario.topology;
    if beam == 1 {
        if let NodeCondition::Feedback(_) = scenario.conditions[0] {
            return Some((0, 0.0));
        }
    }
    if topo.is_simple(beam) {
        if let NodeCondition::Feedback(_) = scenario.conditions[beam] {
            return Some((beam, scenario.beams[beam - 1].length));
        }
    }
    None
}

/// Largest eigenvalue of
/// `K^-1/2 Lambda1 K^-1/2 + K^1/2 Lambda2 K^1/2` at a controlled endpoint;
/// its reciprocal caps the admissible weight there.
pub fn boundary_constant(
    params: &BeamParams,
    choice: WChoice,
    x: f64,
    gain: &Mat6,
) -> Result<f64, CertifyError> {
    let (l1, l2) = lambda_pair(params, choice, x)?;
    let k_sqrt = spd_power(gain, SpdPower::Sqrt)?;
    let k_inv_sqrt = spd_power(gain, SpdPower::InvSqrt)?;
    let m = (k_inv_sqrt * l1 * k_inv_sqrt + k_sqrt * l2 * k_sqrt).symmetric_part();
    Ok(linalg::max_eig(&m))
}

/// Picks the smallest scale satisfying the positivity and boundary
/// constraints for the given weights, with 10% slack. All-zero weights admit
/// any scale; one is returned.
pub fn choose_rho(
    scenario: &NetworkScenario,
    w_choice: WChoice,
    weights: &[WeightFunction],
    grid_points: usize,
) -> Result<RhoReport, CertifyError> {
    if weights.len() != scenario.beams.len() {
        return Err(CertifyError::Invalid("one weight per beam required".into()));
    }
    let mut per_beam = Vec::new();
    let mut rho_min = 0.0f64;
    for (idx, params) in scenario.beams.iter().enumerate() {
        let beam_no = idx + 1;
        let grid = beam_cert_grid(params, w_choice, grid_points)?;
        let weight = &weights[idx];
        let w_max = grid.xs.iter().map(|&x| weight.w(x).abs()).fold(0.0f64, f64::max);
        let c_theta = grid.theta_max;
        let mut required = w_max * c_theta.sqrt();
        let c_mu = match controlled_endpoint(scenario, beam_no) {
            Some((node, x)) => {
                let gain = scenario.conditions[node].gain();
                let c_mu = boundary_constant(params, w_choice, x, &gain)?;
                required = required.max(weight.w(x).abs() * c_mu);
                Some(c_mu)
            }
            None => None,
        };
        let beta_coefficient = match c_mu {
            Some(c_mu) => (1.0 / c_theta.sqrt()).min(1.0 / c_mu),
            None => 1.0 / c_theta.sqrt(),
        };
        per_beam.push(RhoConstraint {
            beam: beam_no,
            c_theta,
            c_mu,
            beta_coefficient,
            required_rho: required,
        });
        rho_min = rho_min.max(required);
    }
    let rho = if rho_min == 0.0 { 1.0 } else { 1.1 * rho_min };
    Ok(RhoReport { rho, per_beam })
}

/// Grid resolution and optional thread cap for the pointwise checks.
#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    pub grid_points: usize,
    pub threads: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions { grid_points: 257, threads: 1 }
    }
}

/// The verified certificate: ansatz, constants, margins and the linearized
/// decay rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub scenario_hash: Option<String>,
    pub ansatz: AnsatzConfig,
    pub grid_points: usize,
    pub c_lambda: Vec<f64>,
    pub c_xi: Vec<f64>,
    pub c_theta: Vec<f64>,
    pub rho_report: RhoReport,
    /// Least-negative largest eigenvalue of the dissipation matrix per beam.
    pub c4: Vec<f64>,
    /// Norm-equivalence constant of the Lyapunov functional.
    pub eta_equiv: f64,
    /// Linearized exponential rate: the Lyapunov value is certified to decay
    /// like `exp(-2 beta t)` for small data.
    pub beta: f64,
    pub checks: Vec<CheckMargin>,
    pub valid: bool,
}

struct BeamCheckResult {
    checks: Vec<CheckMargin>,
    c_lambda: f64,
    c_xi: f64,
    c_theta: f64,
    c4: f64,
    q_min: f64,
    q_max: f64,
}

fn check_beam(
    params: &BeamParams,
    ansatz: &AnsatzConfig,
    beam_idx: usize,
    grid_points: usize,
) -> Result<BeamCheckResult, CertifyError> {
    let beam_no = beam_idx + 1;
    let grid = beam_cert_grid(params, ansatz.w_choice, grid_points)?;
    let weight = &ansatz.weights[beam_idx];
    let mut q_min = f64::INFINITY;
    let mut q_max = f64::NEG_INFINITY;
    let mut qa_asym = 0.0f64;
    let mut s_max = f64::NEG_INFINITY;
    let mut split_gap = 0.0f64;
    let mut c_lambda = f64::INFINITY;
    let mut c_xi = f64::NEG_INFINITY;
    let mut w_margin = f64::INFINITY;
    for (j, &x) in grid.xs.iter().enumerate() {
        let q_bar = ansatz.q_bar(params, beam_idx, x)?;
        q_min = q_min.min(linalg::min_eig(&q_bar));
        q_max = q_max.max(linalg::max_eig(&q_bar));
        let qa = q_bar * params.transport(x)?;
        qa_asym = qa_asym.max(linalg::asymmetry(&qa));
        let (s_bar, lambda, xi) = assemble_s_bar(&grid, weight, j);
        s_max = s_max.max(linalg::max_eig(&s_bar));
        let direct = s_bar_direct(params, ansatz, beam_idx, &grid, j)?;
        split_gap = split_gap.max((s_bar - direct).norm());
        c_lambda = c_lambda.min(linalg::min_eig(&lambda));
        c_xi = c_xi.max(linalg::max_eig(&xi));
        if weight.family != WeightFamily::Zero {
            w_margin = w_margin.min(weight.inequality_margin(x));
        }
    }
    let mut checks = vec![
        CheckMargin::strict(format!("lyapunov weight positive definite (beam {beam_no})"), q_min),
        CheckMargin::slack(
            format!("weighted transport symmetric (beam {beam_no})"),
            linalg::SYM_TOL - qa_asym,
        ),
        CheckMargin::strict(
            format!("dissipation matrix negative definite (beam {beam_no})"),
            -s_max,
        ),
        CheckMargin::slack(
            format!("split/direct dissipation assembly agreement (beam {beam_no})"),
            1e-9 - split_gap,
        ),
    ];
    if weight.family != WeightFamily::Zero {
        checks.push(CheckMargin::strict(
            format!("weight differential inequality (beam {beam_no})"),
            w_margin,
        ));
    }
    Ok(BeamCheckResult {
        checks,
        c_lambda,
        c_xi,
        c_theta: grid.theta_max,
        c4: s_max,
        q_min,
        q_max,
    })
}

/// Grid-verifies the certificate properties for the given ansatz and
/// assembles the margins, constants and linearized decay rate.
pub fn check_certificate(
    scenario: &NetworkScenario,
    ansatz: &AnsatzConfig,
    opts: CertifyOptions,
) -> Result<Certificate, CertifyError> {
    scenario.validate()?;
    if ansatz.weights.len() != scenario.beams.len() {
        return Err(CertifyError::Invalid("one weight per beam required".into()));
    }
    if !(ansatz.rho > 0.0) {
        return Err(CertifyError::Invalid("the scale rho must be positive".into()));
    }

    let n = scenario.beams.len();
    let threads = opts.threads.max(1).min(n);
    let mut results: Vec<Option<BeamCheckResult>> = (0..n).map(|_| None).collect();
    if threads <= 1 {
        for (idx, slot) in results.iter_mut().enumerate() {
            *slot = Some(check_beam(&scenario.beams[idx], ansatz, idx, opts.grid_points)?);
        }
    } else {
        let chunks: Vec<Vec<usize>> =
            (0..threads).map(|t| (t..n).step_by(threads).collect()).collect();
        let outputs = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&idx| {
                                (idx, check_beam(&scenario.beams[idx], ansatz, idx, opts.grid_points))
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("check thread")).collect::<Vec<_>>()
        });
        for (idx, res) in outputs {
            results[idx] = Some(res?);
        }
    }
    let results: Vec<BeamCheckResult> = results.into_iter().map(|r| r.expect("beam result")).collect();

    let mut checks = Vec::new();
    let mut c_lambda = Vec::new();
    let mut c_xi = Vec::new();
    let mut c_theta = Vec::new();
    let mut c4 = Vec::new();
    let mut q_min_all = f64::INFINITY;
    let mut q_max_all = f64::NEG_INFINITY;
    for r in &results {
        checks.extend(r.checks.iter().cloned());
        c_lambda.push(r.c_lambda);
        c_xi.push(r.c_xi);
        c_theta.push(r.c_theta);
        c4.push(r.c4);
        q_min_all = q_min_all.min(r.q_min);
        q_max_all = q_max_all.max(r.q_max);
    }

    // Boundary form: sign conditions at multiple and uncontrolled simple
    // nodes, scale conditions at controlled simple nodes.
    let topo = &scenario.topology;
    for node in topo.multiple_nodes() {
        let w_end = ansatz.weights[node - 1].w(scenario.beams[node - 1].length);
        checks.push(CheckMargin::slack(
            format!("weight nonpositive at the ending side of node {node}"),
            -w_end,
        ));
        for i in topo.outgoing(node) {
            let w0 = ansatz.weights[i - 1].w(0.0);
            checks.push(CheckMargin::slack(
                format!("weight nonnegative at the starting side of edge {i} (node {node})"),
                w0,
            ));
        }
    }
    for node in topo.simple_nodes() {
        let (beam_idx, x) = if node == 0 {
            (0usize, 0.0)
        } else {
            (node - 1, scenario.beams[node - 1].length)
        };
        let params = &scenario.beams[beam_idx];
        let wx = ansatz.weights[beam_idx].w(x);
        match &scenario.conditions[node] {
            NodeCondition::Feedback(k) => {
                // mu = -2 rho K + |w| Lambda1 + |w| K Lambda2 K must be
                // negative semi-definite.
                let (l1, l2) = lambda_pair(params, ansatz.w_choice, x)?;
                let mu = (-2.0 * ansatz.rho * k
                    + wx.abs() * l1
                    + wx.abs() * k * l2 * k)
                    .symmetric_part();
                checks.push(CheckMargin::slack(
                    format!("boundary form nonpositive at controlled node {node}"),
                    -linalg::max_eig(&mu),
                ));
                let c_mu = boundary_constant(params, ansatz.w_choice, x, k)?;
                let c_th = c_theta[beam_idx];
                let beta_i = (1.0 / c_th.sqrt()).min(1.0 / c_mu);
                checks.push(CheckMargin::strict(
                    format!("scale dominates endpoint weight at node {node}"),
                    ansatz.rho * beta_i - wx.abs(),
                ));
            }
            NodeCondition::Free | NodeCondition::Clamped => {
                // no gain to absorb the weight terms: they must carry the
                // right sign on their own.
                let margin = if node == 0 { wx } else { -wx };
                checks.push(CheckMargin::slack(
                    format!("weight sign compatible with uncontrolled node {node}"),
                    margin,
                ));
            }
        }
    }

    // positivity constraint rho > |w| sqrt(c_theta) over each beam
    for (idx, params) in scenario.beams.iter().enumerate() {
        let xs = uniform_grid(params.length, opts.grid_points.max(3) - 1);
        let w_max = xs.iter().map(|&x| ansatz.weights[idx].w(x).abs()).fold(0.0f64, f64::max);
        checks.push(CheckMargin::strict(
            format!("scale dominates interior weight (beam {})", idx + 1),
            ansatz.rho - w_max * c_theta[idx].sqrt(),
        ));
    }

    let rho_report = choose_rho(scenario, ansatz.w_choice, &ansatz.weights, opts.grid_points)?;

    let valid = checks.iter().all(|c| c.satisfied);
    let c4_max = c4.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let beta = if valid && c4_max < 0.0 && q_max_all > 0.0 {
        -c4_max / (2.0 * q_max_all)
    } else {
        0.0
    };
    let eta_equiv = if q_min_all > 0.0 {
        q_max_all.max(1.0 / q_min_all)
    } else {
        f64::INFINITY
    };

    Ok(Certificate {
        scenario_hash: None,
        ansatz: ansatz.clone(),
        grid_points: opts.grid_points,
        c_lambda,
        c_xi,
        c_theta,
        rho_report,
        c4,
        eta_equiv,
        beta,
        checks,
        valid,
    })
}

/// Builds the canonical star ansatz: per-beam exponential weights with the
/// slope forced by the measured constants, then the smallest admissible
/// scale (or a caller-provided one).
pub fn default_star_ansatz(
    scenario: &NetworkScenario,
    w_choice: WChoice,
    grid_points: usize,
    rho: Option<f64>,
) -> Result<AnsatzConfig, CertifyError> {
    scenario.validate()?;
    let mut weights = Vec::with_capacity(scenario.beams.len());
    for (idx, params) in scenario.beams.iter().enumerate() {
        let grid = beam_cert_grid(params, w_choice, grid_points)?;
        let mut c_lambda = f64::INFINITY;
        let mut c_xi_pos = f64::NEG_INFINITY;
        let mut c_xi_neg = f64::NEG_INFINITY;
        let probe_pos = WeightFunction::nonnegative_exp(0.0, 1.0, 1.0, params.length)?;
        let probe_neg = WeightFunction::nonpositive_exp(-1.0, 0.0, 1.0, params.length)?;
        for j in 0..grid.xs.len() {
            let (_, lambda, xi_pos) = assemble_s_bar(&grid, &probe_pos, j);
            let (_, _, xi_neg) = assemble_s_bar(&grid, &probe_neg, j);
            c_lambda = c_lambda.min(linalg::min_eig(&lambda));
            c_xi_pos = c_xi_pos.max(linalg::max_eig(&xi_pos));
            c_xi_neg = c_xi_neg.max(linalg::max_eig(&xi_neg));
        }
        if !(c_lambda > 0.0) {
            return Err(CertifyError::InfeasibleWeights(format!(
                "coupling blocks of beam {} are not positive definite",
                idx + 1
            )));
        }
        // slope parameter strictly above the sufficient threshold
        if idx == 0 {
            let eta = (c_xi_neg.max(0.0) / c_lambda) * 1.05 + 1e-6;
            weights.push(WeightFunction::nonpositive_exp(-1.0, 0.0, eta, params.length)?);
        } else {
            let eta = (c_xi_pos.max(0.0) / c_lambda) * 1.05 + 1e-6;
            weights.push(WeightFunction::nonnegative_exp(0.0, 1.0, eta, params.length)?);
        }
    }
    let rho = match rho {
        Some(r) => r,
        None => choose_rho(scenario, w_choice, &weights, grid_points)?.rho,
    };
    Ok(AnsatzConfig { rho, w_choice, weights })
}

/// Quadratic Lyapunov value of a sampled state: state term plus the
/// first-order term built from the governing equation.
pub fn lyapunov_value(
    ansatz: &AnsatzConfig,
    scenario: &NetworkScenario,
    grids: &[Vec<f64>],
    state: &PhysState,
) -> Result<f64, CertifyError> {
    let mut total = 0.0;
    for (idx, params) in scenario.beams.iter().enumerate() {
        let xs = &grids[idx];
        let ys = &state.per_beam[idx];
        let rates = beam::time_derivative(params, xs, ys)?;
        let mut integrand = Vec::with_capacity(xs.len());
        for ((x, y), rate) in xs.iter().zip(ys).zip(&rates) {
            let q = ansatz.q_bar(params, idx, *x)?;
            integrand.push(y.dot(&(q * y)) + rate.dot(&(q * rate)));
        }
        total += trapezoid(xs, &integrand);
    }
    Ok(total)
}

/// State-only Lyapunov value (no time-derivative term).
pub fn lyapunov_value_order0(
    ansatz: &AnsatzConfig,
    scenario: &NetworkScenario,
    grids: &[Vec<f64>],
    state: &PhysState,
) -> Result<f64, CertifyError> {
    let mut total = 0.0;
    for (idx, params) in scenario.beams.iter().enumerate() {
        let xs = &grids[idx];
        let ys = &state.per_beam[idx];
        let mut integrand = Vec::with_capacity(xs.len());
        for (x, y) in xs.iter().zip(ys) {
            let q = ansatz.q_bar(params, idx, *x)?;
            integrand.push(y.dot(&(q * y)));
        }
        total += trapezoid(xs, &integrand);
    }
    Ok(total)
}

/// Diagonal-frame weight closed form for the square-root coupling choice:
/// `Q = diag((rho + w) I, (rho - w) I) * Qd` with `Qd = diag(D^-2, D^-2)/2`.
pub fn diagonal_weight_closed_form(rho: f64, w: f64, point: &PointDiag) -> Mat12 {
    let mut q = Mat12::zeros();
    for i in 0..6 {
        let dinv2 = 1.0 / (point.d[i] * point.d[i]);
        q[(i, i)] = 0.5 * (rho + w) * dinv2;
        q[(6 + i, 6 + i)] = 0.5 * (rho - w) * dinv2;
    }
    q
}

/// Node-level analysis of the diagonal-frame boundary form: the matrix
/// `Mn = B^T Qout Dbar B - Qin Dbar`, its congruent reduction, and the
/// agreement between the two.
#[derive(Debug, Clone)]
pub struct MnReport {
    pub node: usize,
    pub mn: DMatrix<f64>,
    pub mn_tilde: DMatrix<f64>,
    /// `|Mn - P^T Mn_tilde P|` for the congruence factor of the node kind.
    pub congruence_residual: f64,
    pub mn_class: DefinitenessReport,
    pub mn_tilde_class: DefinitenessReport,
    /// Controlled simple nodes: the negative constant whose product with the
    /// scale caps the admissible endpoint weight.
    pub gain_constant: Option<f64>,
}

fn ones_block(k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(6 * k, 6 * k, |i, j| if i % 6 == j % 6 { 1.0 } else { 0.0 })
}

fn block_diag(blocks: &[Mat6]) -> DMatrix<f64> {
    let k = blocks.len();
    let mut out = DMatrix::zeros(6 * k, 6 * k);
    for (s, b) in blocks.iter().enumerate() {
        for i in 0..6 {
            for j in 0..6 {
                out[(6 * s + i, 6 * s + j)] = b[(i, j)];
            }
        }
    }
    out
}

/// Weight values per slot of a node: ending beam at its far end, starting
/// beams with flipped sign at their near end.
fn slot_weights(node: usize, coupling: &NodeCoupling, ansatz: &AnsatzConfig) -> Vec<f64> {
    coupling
        .edges
        .iter()
        .enumerate()
        .map(|(s, &edge)| {
            let w = &ansatz.weights[edge - 1];
            if s == 0 && node != 0 {
                w.w(w.length)
            } else {
                -w.w(0.0)
            }
        })
        .collect()
}

/// Boundary-form analysis of one node at given per-slot weight values
/// (ending beam's value first, starting beams' negated values after), for
/// the closed multiplicative diagonal weight.
pub fn node_form_analysis(
    coupling: &NodeCoupling,
    rho: f64,
    wbar_vals: &[f64],
) -> Result<MnReport, CertifyError> {
    let class_tol = 1e-10;
    {
        let node = coupling.node;
        let k = coupling.k();
        if wbar_vals.len() != k {
            return Err(CertifyError::Invalid("one weight value per slot required".into()));
        }
        let dim = 6 * k;
        let dbar = coupling.dbar_stacked();
        let refl = &coupling.reflection;

        let mut qout_d = DMatrix::zeros(dim, dim);
        let mut qin_d = DMatrix::zeros(dim, dim);
        let mut wbar = DMatrix::zeros(dim, dim);
        for s in 0..k {
            for i in 0..6 {
                let idx = 6 * s + i;
                qout_d[(idx, idx)] = 0.5 * (rho + wbar_vals[s]) / dbar[idx];
                qin_d[(idx, idx)] = 0.5 * (rho - wbar_vals[s]) / dbar[idx];
                wbar[(idx, idx)] = wbar_vals[s];
            }
        }
        let mn = refl.transpose() * &qout_d * refl - &qin_d;
        let mn = (&mn + mn.transpose()) * 0.5;

        let (mn_tilde, residual, gain_constant) = if coupling.is_multiple {
            let sig = block_diag(&coupling.sigmas);
            let sum_k: Mat6 = (coupling.sigma_sum + coupling.kbar).symmetric_part();
            let sum_k_blocks = vec![sum_k; k];
            let sum_kd = block_diag(&sum_k_blocks);
            let kbar_d = block_diag(&vec![coupling.kbar; k]);
            let ones = ones_block(k);
            let sig_inv = block_diag(
                &coupling
                    .sigmas
                    .iter()
                    .map(|s| spd_power(s, SpdPower::Inv))
                    .collect::<Result<Vec<_>, _>>()?,
            );
            let mn_tilde = -(2.0 * rho / k as f64) * (&ones * &kbar_d * &ones)
                + 2.0 * (&ones * &wbar * &sig * &ones)
                - &ones * &wbar * &sum_kd
                - &sum_kd * &wbar * &ones
                + &wbar * &sum_kd * &sig_inv * &sum_kd;
            let mn_tilde = (&mn_tilde + mn_tilde.transpose()) * 0.5;
            let gammas = block_diag(&coupling.gammas);
            let sum_k_inv = spd_power(&sum_k, SpdPower::Inv)?;
            let p = block_diag(&vec![sum_k_inv; k]) * &sig * &gammas;
            let residual = (&mn - p.transpose() * &mn_tilde * &p).norm();
            (mn_tilde, residual, None)
        } else {
            match coupling.condition {
                NodeCondition::Feedback(_) => {
                    let d_sqrt = Mat6::from_diagonal(&coupling.dbars[0].map(f64::sqrt));
                    let core = (d_sqrt
                        * coupling.gammas[0].transpose()
                        * coupling.kbar
                        * coupling.gammas[0]
                        * d_sqrt)
                        .symmetric_part();
                    let eig = sym_eig6(&core)?;
                    let z = eig.vectors.transpose();
                    let mut mn_tilde6 = Mat6::zeros();
                    let mut c_k = f64::NEG_INFINITY;
                    for j in 0..6 {
                        let up = eig.values[j];
                        let contraction = (1.0 - up) * (1.0 - up) / ((1.0 + up) * (1.0 + up));
                        mn_tilde6[(j, j)] = rho * (contraction - 1.0)
                            + wbar_vals[0] * (contraction + 1.0);
                        c_k = c_k.max((contraction - 1.0) / (contraction + 1.0));
                    }
                    let d_inv_sqrt =
                        Mat6::from_diagonal(&coupling.dbars[0].map(|s| 1.0 / s.sqrt()));
                    let reduced: Mat6 =
                        0.5 * d_inv_sqrt * z.transpose() * mn_tilde6 * z * d_inv_sqrt;
                    let mut residual = 0.0f64;
                    for i in 0..6 {
                        for j in 0..6 {
                            residual += (mn[(i, j)] - reduced[(i, j)]).powi(2);
                        }
                    }
                    let mn_tilde = DMatrix::from_fn(6, 6, |i, j| mn_tilde6[(i, j)]);
                    (mn_tilde, residual.sqrt(), Some(c_k))
                }
                NodeCondition::Free | NodeCondition::Clamped => {
                    // reflection is a signed identity: Mn = wbar Dbar^-1
                    let expected = DMatrix::from_fn(6, 6, |i, j| {
                        if i == j {
                            wbar_vals[0] / dbar[i]
                        } else {
                            0.0
                        }
                    });
                    let residual = (&mn - &expected).norm();
                    (expected, residual, None)
                }
            }
        };

        let mn_class = definiteness_dyn(&mn, class_tol)?;
        let mn_tilde_class = definiteness_dyn(&mn_tilde, class_tol)?;
        Ok(MnReport {
            node,
            mn,
            mn_tilde,
            congruence_residual: residual,
            mn_class,
            mn_tilde_class,
            gain_constant,
        })
    }
}

/// Builds the node reports for the square-root coupling ansatz, whose
/// diagonal-frame weight takes the closed multiplicative form.
pub fn build_mn_reports(
    scenario: &NetworkScenario,
    couplings: &[NodeCoupling],
    ansatz: &AnsatzConfig,
) -> Result<Vec<MnReport>, CertifyError> {
    if ansatz.w_choice != WChoice::SqrtMassFlex {
        return Err(CertifyError::Invalid(
            "the diagonal node analysis requires the square-root coupling choice".into(),
        ));
    }
    if ansatz.weights.len() != scenario.beams.len() {
        return Err(CertifyError::Invalid("one weight per beam required".into()));
    }
    couplings
        .iter()
        .map(|coupling| {
            let wbar_vals = slot_weights(coupling.node, coupling, ansatz);
            node_form_analysis(coupling, ansatz.rho, &wbar_vals)
        })
        .collect()
}

/// Outcome of the missing-control analysis: reports the sign conflict on the
/// first beam's weight when node 0 is not controlled. Infeasibility of the
/// ansatz, not a disproof of stability.
#[derive(Debug, Clone, Serialize)]
pub struct ControlRemovalReport {
    pub applicable: bool,
    pub feasible_within_ansatz: bool,
    pub conflicts: Vec<String>,
}

pub fn removed_control_diagnostic(scenario: &NetworkScenario) -> ControlRemovalReport {
    let uncontrolled_root = matches!(
        scenario.conditions[0],
        NodeCondition::Free | NodeCondition::Clamped
    );
    if !uncontrolled_root {
        return ControlRemovalReport {
            applicable: false,
            feasible_within_ansatz: true,
            conflicts: vec![],
        };
    }
    let conflicts = vec![
        "the weight of beam 1 must be increasing for the dissipation matrix to be negative definite"
            .to_string(),
        "node 0 without a control requires a nonnegative weight at the start of beam 1".to_string(),
        "the boundary estimate at the other end of beam 1 requires a nonpositive weight there"
            .to_string(),
        "together these force the weight of beam 1 to vanish identically, which leaves the \
         dissipation matrix indefinite"
            .to_string(),
    ];
    ControlRemovalReport { applicable: true, feasible_within_ansatz: false, conflicts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::{ParamField, RotationField};
    use crate::diag::{build_diagonalization, build_nodal_coupling, BeamDiagonalization};
    use crate::linalg::{Mat3, Vec3, Vec6, Vec12};
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

    fn unit_star(n: usize) -> NetworkScenario {
        let topo = NetworkTopology::star(n);
        let mut conditions = vec![NodeCondition::Free; topo.node_count()];
        for node in topo.simple_nodes() {
            conditions[node] = NodeCondition::Feedback(Mat6::identity());
        }
        NetworkScenario {
            beams: (0..n).map(|_| BeamParams::unit(1.0)).collect(),
            topology: topo,
            conditions,
            initial: InitialDatum::Zero,
        }
    }

    #[test]
    fn coupling_choices_satisfy_their_contracts() {
        let unit = BeamParams::unit(1.0);
        assert_relative_eq!(
            build_w(&unit, WChoice::Identity, 0.3).unwrap(),
            Mat6::identity(),
            epsilon = 1e-14
        );
        let (l1, l2) = lambda_pair(&unit, WChoice::Identity, 0.3).unwrap();
        assert_relative_eq!(l1, Mat6::identity(), epsilon = 1e-13);
        assert_relative_eq!(l2, Mat6::identity(), epsilon = 1e-13);

        let mut rng = StdRng::seed_from_u64(61);
        for _ in 0..10 {
            let beam = random_beam(&mut rng);
            for choice in [WChoice::Identity, WChoice::MassFlex, WChoice::SqrtMassFlex] {
                let (l1, l2) = lambda_pair(&beam, choice, 0.5).unwrap();
                assert!(linalg::min_eig(&l1) > 0.0);
                assert!(linalg::min_eig(&l2) > 0.0);
            }
            // square-root choice: positivity matrix is exactly the identity
            let theta = positivity_matrix(&beam, WChoice::SqrtMassFlex, 0.5).unwrap();
            assert_relative_eq!(theta, Mat6::identity(), epsilon = 1e-9);
            // product choice: blocks reduce to the parameters themselves
            let (l1, l2) = lambda_pair(&beam, WChoice::MassFlex, 0.5).unwrap();
            assert_relative_eq!(l1, beam.mass_at(0.5), epsilon = 1e-10);
            assert_relative_eq!(l2, beam.flexibility_at(0.5), epsilon = 1e-10);
        }
    }

    #[test]
    fn weight_closed_forms() {
        let w = WeightFunction::nonpositive_exp(-1.0, 0.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(w.q(0.0), -1.0, epsilon = 1e-14);
        assert_relative_eq!(w.q(1.0), 0.0, epsilon = 1e-14);
        // q(x) = e^-x (x - 1); margin e^-x
        for &x in &[0.0, 0.25, 0.5, 1.0] {
            assert_relative_eq!(w.q(x), (-x).exp() * (x - 1.0), epsilon = 1e-13);
            assert_relative_eq!(w.inequality_margin(x), (-x).exp(), epsilon = 1e-12);
        }
        assert!(w.w(1.0).abs() <= 1e-15);
        assert!(w.w(0.0) < 0.0);

        let w = WeightFunction::nonnegative_exp(0.0, 1.0, 1.0, 1.0).unwrap();
        for &x in &[0.0, 0.5, 1.0] {
            assert_relative_eq!(w.q(x), x.exp() * (-1.0f64).exp() * x, epsilon = 1e-13);
        }
        assert_relative_eq!(w.q(1.0), 1.0, epsilon = 1e-14);
        assert!(w.w(0.0).abs() <= 1e-15);

        assert!(WeightFunction::nonpositive_exp(-1.0, -1.0, 1.0, 1.0).is_err());
        assert!(WeightFunction::nonnegative_exp(0.5, 0.5, 1.0, 1.0).is_err());
        assert!(WeightFunction::nonnegative_exp(-0.1, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn weight_margins_positive_for_random_admissible_parameters() {
        let mut rng = StdRng::seed_from_u64(67);
        for _ in 0..100 {
            let eta = rng.random_range(0.1..4.0);
            let l = rng.random_range(0.2..3.0);
            let b = -rng.random_range(0.0..2.0);
            let a = b - rng.random_range(0.01..2.0);
            let w = WeightFunction::nonpositive_exp(a, b, eta, l).unwrap();
            assert!((w.q(0.0) - a).abs() <= 1e-12);
            assert!((w.q(l) - b).abs() <= 1e-12);
            for j in 0..=100 {
                let x = l * j as f64 / 100.0;
                assert!(w.inequality_margin(x) > 0.0);
                assert!(w.dw(x) > 0.0);
                assert!(w.w(x) <= 1e-12);
            }
        }
    }

    #[test]
    fn split_equals_direct_assembly() {
        let mut rng = StdRng::seed_from_u64(71);
        for choice in [WChoice::Identity, WChoice::MassFlex, WChoice::SqrtMassFlex] {
            let mut beam = random_beam(&mut rng);
            beam.rotation = RotationField::Helical {
                base: Mat3::identity(),
                curvature: Vec3::new(0.3, -0.1, 0.2),
            };
            let weights = vec![WeightFunction::nonnegative_exp(0.0, 0.8, 1.3, 1.0).unwrap()];
            let ansatz = AnsatzConfig { rho: 2.0, w_choice: choice, weights };
            let grid = beam_cert_grid(&beam, choice, 33).unwrap();
            for j in [0usize, 7, 16, 32] {
                let (split, _, _) = assemble_s_bar(&grid, &ansatz.weights[0], j);
                let direct = s_bar_direct(&beam, &ansatz, 0, &grid, j).unwrap();
                assert!((split - direct).norm() <= 1e-9, "gap {}", (split - direct).norm());
            }
        }
    }

    #[test]
    fn zero_weight_collapses_the_ansatz() {
        let beam = BeamParams::unit(1.0);
        let ansatz = AnsatzConfig {
            rho: 1.0,
            w_choice: WChoice::SqrtMassFlex,
            weights: vec![WeightFunction::zero(1.0)],
        };
        let grid = beam_cert_grid(&beam, WChoice::SqrtMassFlex, 17).unwrap();
        let (split, _, _) = assemble_s_bar(&grid, &ansatz.weights[0], 8);
        assert_eq!(split, Mat12::zeros());
        let direct = s_bar_direct(&beam, &ansatz, 0, &grid, 8).unwrap();
        assert!(direct.norm() <= 1e-12);
        // Qbar = rho diag(M, C): the Lyapunov value reduces to the energy
        let q = ansatz.q_bar(&beam, 0, 0.5).unwrap();
        assert_relative_eq!(q, beam.energy_weight(0.5).unwrap(), epsilon = 1e-13);
    }

    #[test]
    fn straight_beam_dissipation_condition() {
        // with zero curvature and unit parameters the split form gives
        // S = -w' I + |w| Xi with the largest eigenvalue of Xi equal to 1;
        // the weight slope condition makes S negative definite.
        let beam = BeamParams::unit(1.0);
        let grid = beam_cert_grid(&beam, WChoice::SqrtMassFlex, 65).unwrap();
        let weight = WeightFunction::nonnegative_exp(0.0, 1.0, 1.2, 1.0).unwrap();
        for j in 0..grid.xs.len() {
            let (s_bar, lambda, xi) = assemble_s_bar(&grid, &weight, j);
            assert_relative_eq!(lambda, Mat12::identity(), epsilon = 1e-12);
            assert_relative_eq!(linalg::max_eig(&xi), 1.0, epsilon = 1e-9);
            let expected = -weight.dw(grid.xs[j]) + weight.w(grid.xs[j]).abs();
            assert_relative_eq!(linalg::max_eig(&s_bar), expected, epsilon = 1e-9);
            assert!(linalg::max_eig(&s_bar) < 0.0);
        }
    }

    #[test]
    fn choose_rho_scaling_and_degenerate_cases() {
        let scenario = unit_star(3);
        let weights: Vec<WeightFunction> = vec![
            WeightFunction::nonpositive_exp(-1.0, 0.0, 1.1, 1.0).unwrap(),
            WeightFunction::nonnegative_exp(0.0, 1.0, 1.1, 1.0).unwrap(),
            WeightFunction::nonnegative_exp(0.0, 1.0, 1.1, 1.0).unwrap(),
        ];
        let report = choose_rho(&scenario, WChoice::SqrtMassFlex, &weights, 33).unwrap();
        // unit beams, K = I: c_theta = 1 and c_mu = 2, so beta_i = 1/2 and
        // the unit-amplitude weights need rho >= 2 (times 1.1 slack).
        for c in &report.per_beam {
            assert_relative_eq!(c.c_theta, 1.0, epsilon = 1e-9);
            assert_relative_eq!(c.c_mu.unwrap(), 2.0, epsilon = 1e-9);
            assert_relative_eq!(c.beta_coefficient, 0.5, epsilon = 1e-9);
        }
        assert_relative_eq!(report.rho, 2.2, epsilon = 1e-9);

        // doubling the weights doubles the required scale
        let doubled: Vec<WeightFunction> = vec![
            WeightFunction::nonpositive_exp(-2.0, 0.0, 1.1, 1.0).unwrap(),
            WeightFunction::nonnegative_exp(0.0, 2.0, 1.1, 1.0).unwrap(),
            WeightFunction::nonnegative_exp(0.0, 2.0, 1.1, 1.0).unwrap(),
        ];
        let report2 = choose_rho(&scenario, WChoice::SqrtMassFlex, &doubled, 33).unwrap();
        assert_relative_eq!(report2.rho, 2.0 * report.rho, max_relative = 1e-9);

        // all-zero weights: any scale works, one is returned
        let zeros: Vec<WeightFunction> = (0..3).map(|_| WeightFunction::zero(1.0)).collect();
        let report3 = choose_rho(&scenario, WChoice::SqrtMassFlex, &zeros, 33).unwrap();
        assert_eq!(report3.rho, 1.0);
    }

    #[test]
    fn star_certificate_is_valid_with_positive_rate() {
        let scenario = unit_star(3);
        let ansatz =
            default_star_ansatz(&scenario, WChoice::SqrtMassFlex, 65, None).unwrap();
        let cert = check_certificate(&scenario, &ansatz, CertifyOptions { grid_points: 65, threads: 1 })
            .unwrap();
        assert!(cert.valid, "failed checks: {:?}", cert.checks.iter().filter(|c| !c.satisfied).collect::<Vec<_>>());
        assert!(cert.beta > 0.0);
        assert!(cert.eta_equiv >= 1.0);
    }

    #[test]
    fn threads_do_not_change_the_certificate() {
        let scenario = unit_star(3);
        let ansatz = default_star_ansatz(&scenario, WChoice::SqrtMassFlex, 33, None).unwrap();
        let a = check_certificate(&scenario, &ansatz, CertifyOptions { grid_points: 33, threads: 1 })
            .unwrap();
        let b = check_certificate(&scenario, &ansatz, CertifyOptions { grid_points: 33, threads: 3 })
            .unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.valid, b.valid);
        let margins_a: Vec<f64> = a.checks.iter().map(|c| c.margin).collect();
        let margins_b: Vec<f64> = b.checks.iter().map(|c| c.margin).collect();
        assert_eq!(margins_a, margins_b);
    }

    #[test]
    fn undersized_rho_invalidates_the_certificate() {
        let scenario = unit_star(3);
        let mut ansatz = default_star_ansatz(&scenario, WChoice::SqrtMassFlex, 33, None).unwrap();
        ansatz.rho = 1e-9;
        let cert = check_certificate(&scenario, &ansatz, CertifyOptions { grid_points: 33, threads: 1 })
            .unwrap();
        assert!(!cert.valid);
        assert!(cert
            .checks
            .iter()
            .any(|c| !c.satisfied && (c.name.contains("positive definite") || c.name.contains("scale"))));
        assert_eq!(cert.beta, 0.0);
    }

    #[test]
    fn zero_weights_leave_the_dissipation_indefinite() {
        let scenario = unit_star(3);
        let ansatz = AnsatzConfig {
            rho: 1.0,
            w_choice: WChoice::SqrtMassFlex,
            weights: (0..3).map(|_| WeightFunction::zero(1.0)).collect(),
        };
        let cert = check_certificate(&scenario, &ansatz, CertifyOptions { grid_points: 33, threads: 1 })
            .unwrap();
        assert!(!cert.valid);
        let s_check = cert
            .checks
            .iter()
            .find(|c| c.name.contains("dissipation matrix"))
            .unwrap();
        assert!(!s_check.satisfied);
    }

    #[test]
    fn lyapunov_reduces_to_scaled_energy_for_zero_weights() {
        let scenario = unit_star(2);
        let rho = 3.0;
        let ansatz = AnsatzConfig {
            rho,
            w_choice: WChoice::SqrtMassFlex,
            weights: (0..2).map(|_| WeightFunction::zero(1.0)).collect(),
        };
        let grids: Vec<Vec<f64>> =
            scenario.beams.iter().map(|b| uniform_grid(b.length, 16)).collect();
        let mut rng = StdRng::seed_from_u64(73);
        let mut state = PhysState::zeros(&[17, 17]);
        for ys in &mut state.per_beam {
            for y in ys.iter_mut() {
                *y = Vec12::from_fn(|_, _| rng.random_range(-1e-2..1e-2));
            }
        }
        let l0 = lyapunov_value_order0(&ansatz, &scenario, &grids, &state).unwrap();
        let mut energy = 0.0;
        for (idx, params) in scenario.beams.iter().enumerate() {
            let vals: Vec<f64> = grids[idx]
                .iter()
                .zip(&state.per_beam[idx])
                .map(|(x, y)| y.dot(&(params.energy_weight(*x).unwrap() * y)))
                .collect();
            energy += trapezoid(&grids[idx], &vals);
        }
        assert_relative_eq!(l0, rho * energy, max_relative = 1e-12);
        assert_eq!(
            lyapunov_value_order0(&ansatz, &scenario, &grids, &PhysState::zeros(&[17, 17])).unwrap(),
            0.0
        );
    }

    #[test]
    fn lyapunov_sandwich_on_random_small_states() {
        let scenario = unit_star(3);
        let ansatz = default_star_ansatz(&scenario, WChoice::SqrtMassFlex, 33, None).unwrap();
        let cert = check_certificate(&scenario, &ansatz, CertifyOptions { grid_points: 33, threads: 1 })
            .unwrap();
        let grids: Vec<Vec<f64>> =
            scenario.beams.iter().map(|b| uniform_grid(b.length, 24)).collect();
        let mut rng = StdRng::seed_from_u64(79);
        for _ in 0..20 {
            let mut state = PhysState::zeros(&[25, 25, 25]);
            for ys in &mut state.per_beam {
                for y in ys.iter_mut() {
                    *y = Vec12::from_fn(|_, _| rng.random_range(-1e-2..1e-2));
                }
            }
            let lyap = lyapunov_value(&ansatz, &scenario, &grids, &state).unwrap();
            // plain squared norm with the same quadrature and rate term
            let mut norm_sq = 0.0;
            for (idx, params) in scenario.beams.iter().enumerate() {
                let rates = beam::time_derivative(params, &grids[idx], &state.per_beam[idx]).unwrap();
                let vals: Vec<f64> = state.per_beam[idx]
                    .iter()
                    .zip(&rates)
                    .map(|(y, r)| y.norm_squared() + r.norm_squared())
                    .collect();
                norm_sq += trapezoid(&grids[idx], &vals);
            }
            assert!(lyap <= cert.eta_equiv * norm_sq * (1.0 + 1e-12));
            assert!(lyap >= norm_sq / cert.eta_equiv * (1.0 - 1e-12));
        }
    }

    fn couplings_of(scenario: &NetworkScenario) -> Vec<NodeCoupling> {
        let diags: Vec<BeamDiagonalization> = scenario
            .beams
            .iter()
            .map(|b| build_diagonalization(b, &uniform_grid(b.length, 8)).unwrap())
            .collect();
        build_nodal_coupling(scenario, &diags).unwrap()
    }

    #[test]
    fn node_reports_unit_star() {
        let scenario = unit_star(3);
        let ansatz = default_star_ansatz(&scenario, WChoice::SqrtMassFlex, 33, None).unwrap();
        let couplings = couplings_of(&scenario);
        let reports = build_mn_reports(&scenario, &couplings, &ansatz).unwrap();
        for rep in &reports {
            assert!(rep.congruence_residual <= 1e-10, "node {}: {}", rep.node, rep.congruence_residual);
            assert_eq!(rep.mn_class.class, rep.mn_tilde_class.class);
            // valid star ansatz: every node form is negative semi-definite
            assert!(
                rep.mn_class.max_eig <= 1e-10,
                "node {} has positive boundary form: {}",
                rep.node,
                rep.mn_class.max_eig
            );
        }
        // unit gains on unit beams: eigenvalues of the endpoint form are 1,
        // the contraction constant is -1 and the form is -rho + wbar
        let rep0 = &reports[0];
        assert_relative_eq!(rep0.gain_constant.unwrap(), -1.0, epsilon = 1e-10);
        let expected = -ansatz.rho - ansatz.weights[0].w(0.0);
        assert_relative_eq!(rep0.mn_tilde[(0, 0)], expected, epsilon = 1e-9);
    }

    #[test]
    fn serial_connection_null_form() {
        let mut rng = StdRng::seed_from_u64(83);
        let shared = random_beam(&mut rng);
        let scenario = NetworkScenario {
            topology: NetworkTopology::new(vec![0, 1]),
            beams: vec![shared.clone(), shared.clone()],
            conditions: vec![
                NodeCondition::Feedback(Mat6::identity()),
                NodeCondition::Free,
                NodeCondition::Feedback(Mat6::identity()),
            ],
            initial: InitialDatum::Zero,
        };
        // matched weights at the joint: both vanish there by construction
        let weights = vec![
            WeightFunction::nonpositive_exp(-0.7, 0.0, 1.0, 1.0).unwrap(),
            WeightFunction::nonnegative_exp(0.0, 0.7, 1.0, 1.0).unwrap(),
        ];
        let ansatz = AnsatzConfig { rho: 2.0, w_choice: WChoice::SqrtMassFlex, weights };
        let couplings = couplings_of(&scenario);
        let reports = build_mn_reports(&scenario, &couplings, &ansatz).unwrap();
        let joint = &reports[1];
        assert!(joint.mn_tilde.norm() <= 1e-10, "joint form norm {}", joint.mn_tilde.norm());
        assert!(joint.mn.norm() <= 1e-10);
    }

    #[test]
    fn congruence_preserved_on_random_scenarios() {
        let mut rng = StdRng::seed_from_u64(89);
        for trial in 0..10 {
            let k = 2 + trial % 3;
            let mut scenario = unit_star(k);
            scenario.beams = (0..k).map(|_| random_beam(&mut rng)).collect();
            for node in scenario.topology.simple_nodes() {
                scenario.conditions[node] = NodeCondition::Feedback(random_spd(&mut rng));
            }
            if trial % 2 == 0 {
                scenario.conditions[1] = NodeCondition::Feedback(random_spd(&mut rng));
            }
            let weights: Vec<WeightFunction> = (0..k)
                .map(|i| {
                    if i == 0 {
                        WeightFunction::nonpositive_exp(
                            -rng.random_range(0.2..1.0),
                            0.0,
                            1.0,
                            1.0,
                        )
                        .unwrap()
                    } else {
                        WeightFunction::nonnegative_exp(0.0, rng.random_range(0.2..1.0), 1.0, 1.0)
                            .unwrap()
                    }
                })
                .collect();
            let ansatz = AnsatzConfig {
                rho: rng.random_range(1.0..4.0),
                w_choice: WChoice::SqrtMassFlex,
                weights,
            };
            let couplings = couplings_of(&scenario);
            let reports = build_mn_reports(&scenario, &couplings, &ansatz).unwrap();
            for rep in &reports {
                assert!(
                    rep.congruence_residual <= 1e-10,
                    "trial {trial} node {}: residual {}",
                    rep.node,
                    rep.congruence_residual
                );
                assert_eq!(rep.mn_class.class, rep.mn_tilde_class.class, "trial {trial} node {}", rep.node);
            }
        }
    }

    #[test]
    fn multiple_node_form_negative_with_sign_conditions() {
        // with the sign conditions at a free or controlled joint the node
        // form is negative semi-definite
        let mut rng = StdRng::seed_from_u64(97);
        for gain in [None, Some(random_spd(&mut rng))] {
            let mut scenario = unit_star(3);
            scenario.beams = (0..3).map(|_| random_beam(&mut rng)).collect();
            scenario.conditions[1] = match gain {
                Some(k) => NodeCondition::Feedback(k),
                None => NodeCondition::Free,
            };
            let weights = vec![
                WeightFunction::nonpositive_exp(-0.5, 0.0, 1.0, 1.0).unwrap(),
                WeightFunction::nonnegative_exp(0.0, 0.5, 1.0, 1.0).unwrap(),
                WeightFunction::nonnegative_exp(0.0, 0.5, 1.0, 1.0).unwrap(),
            ];
            let ansatz = AnsatzConfig { rho: 3.0, w_choice: WChoice::SqrtMassFlex, weights };
            let couplings = couplings_of(&scenario);
            let reports = build_mn_reports(&scenario, &couplings, &ansatz).unwrap();
            assert!(reports[1].mn_class.max_eig <= 1e-10);
        }
    }

    #[test]
    fn diagonal_weight_matches_transformed_ansatz() {
        // (L^-1)^T Qbar L^-1 equals the closed multiplicative form for the
        // square-root coupling choice
        let mut rng = StdRng::seed_from_u64(101);
        for _ in 0..10 {
            let beam = random_beam(&mut rng);
            let diag = build_diagonalization(&beam, &uniform_grid(1.0, 4)).unwrap();
            let weights = vec![WeightFunction::nonnegative_exp(0.0, 0.6, 1.0, 1.0).unwrap()];
            let ansatz = AnsatzConfig { rho: 2.5, w_choice: WChoice::SqrtMassFlex, weights };
            for (j, &x) in diag.xs.iter().enumerate() {
                let p = &diag.points[j];
                let q_bar = ansatz.q_bar(&beam, 0, x).unwrap();
                let q_diag = p.l_inv.transpose() * q_bar * p.l_inv;
                let closed = diagonal_weight_closed_form(ansatz.rho, ansatz.weights[0].w(x), p);
                assert!((q_diag - closed).norm() <= 1e-10, "gap {}", (q_diag - closed).norm());
            }
        }
    }

    #[test]
    fn removed_control_reports_the_sign_conflict() {
        let mut scenario = unit_star(3);
        scenario.conditions[0] = NodeCondition::Clamped;
        let report = removed_control_diagnostic(&scenario);
        assert!(report.applicable);
        assert!(!report.feasible_within_ansatz);
        assert!(report.conflicts.len() >= 3);

        let controlled = unit_star(3);
        let report = removed_control_diagnostic(&controlled);
        assert!(!report.applicable);
        assert!(report.feasible_within_ansatz);

        // a transparent-gain node is a feedback node: no conflict
        let mut transparent = unit_star(3);
        let k = crate::diag::transparent_gain(&transparent.beams[0], crate::diag::EndpointSide::Start)
            .unwrap();
        transparent.conditions[0] = NodeCondition::Feedback(k);
        let report = removed_control_diagnostic(&transparent);
        assert!(!report.applicable);
    }
}
