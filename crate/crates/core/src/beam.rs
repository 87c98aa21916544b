//! Per-beam physical data and coefficient assembly.
//!
//! A beam is described by its length, the mass and flexibility matrix fields
//! `M(x)`, `C(x)` (both symmetric positive definite), and the reference
//! rotation field `R(x)` whose arclength derivative carries the initial
//! curvature and twist. From these the first-order coefficients, the
//! quadratic source and the energy weight of the twelve-state model are
//! assembled pointwise.

use crate::grid::{bracket, fd_derivative};
use crate::linalg::{
    self, hat, skew_part, spd_power, vec_of_skew, LinalgError, Mat3, Mat6, Mat12, SpdPower, Vec3,
    Vec6, Vec12,
};
use thiserror::Error;

/// Condition-number cap for mass/flexibility fields; beyond this the inverse
/// in the transport coefficient is not trusted.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum BeamError {
    #[error("coordinate {x} outside beam domain [0, {length}]")]
    OutOfDomain { x: f64, length: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid beam data: {0}")]
    Invalid(String),
}

/// A 6x6 symmetric positive definite matrix field on `[0, length]`.
#[derive(Debug, Clone)]
pub enum ParamField {
    Constant(Mat6),
    /// Samples on an ascending grid covering the beam, interpolated linearly.
    Sampled { xs: Vec<f64>, values: Vec<Mat6> },
}

impl ParamField {
    pub fn eval(&self, x: f64) -> Mat6 {
        match self {
            ParamField::Constant(m) => *m,
            ParamField::Sampled { xs, values } => {
                let (k, t) = bracket(xs, x);
                values[k] * (1.0 - t) + values[k + 1] * t
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ParamField::Constant(_))
    }

    fn validate(&self, length: f64, name: &str) -> Result<(), BeamError> {
        let check_spd = |m: &Mat6| -> Result<(), BeamError> {
            if linalg::asymmetry(m) > linalg::SYM_TOL {
                return Err(BeamError::Invalid(format!("{name} sample is not symmetric")));
            }
            let min = linalg::min_eig(m);
            let max = linalg::max_eig(m);
            if !(min > 0.0 && max / min <= MAX_CONDITION) {
                return Err(BeamError::Invalid(format!(
                    "{name} sample is not positive definite with condition <= 1e12 \
                     (eigenvalues in [{min:.3e}, {max:.3e}])"
                )));
            }
            Ok(())
        };
        match self {
            ParamField::Constant(m) => check_spd(m),
            ParamField::Sampled { xs, values } => {
                if xs.len() < 2 || xs.len() != values.len() {
                    return Err(BeamError::Invalid(format!("{name}: malformed sample grid")));
                }
                if !xs.windows(2).all(|w| w[1] > w[0]) {
                    return Err(BeamError::Invalid(format!("{name}: grid not ascending")));
                }
                let tol = 1e-9 * length.max(1.0);
                if xs[0] > tol || (length - xs[xs.len() - 1]).abs() > tol {
                    return Err(BeamError::Invalid(format!("{name}: grid must cover [0, {length}]")));
                }
                values.iter().try_for_each(check_spd)
            }
        }
    }
}

/// Reference rotation field `R(x)` of the undeformed beam.
#[derive(Debug, Clone)]
pub enum RotationField {
    Identity,
    Constant(Mat3),
    /// `R(x) = base * exp(x * hat(curvature))`: constant curvature-twist,
    /// exact at every point.
    Helical { base: Mat3, curvature: Vec3 },
    /// Rotation samples on an ascending grid; evaluation interpolates the
    /// entries and re-projects onto the rotation group, curvature comes from
    /// finite differences (second order on uniform sample grids).
    Sampled { xs: Vec<f64>, values: Vec<Mat3> },
}

/// Rodrigues form of `exp(theta * hat(axis))`.
fn rotation_exp(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    if theta < 1e-300 {
        return Mat3::identity();
    }
    let k = hat(&(omega / theta));
    Mat3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Nearest rotation matrix in the Frobenius sense.
fn project_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut flip = Mat3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * vt;
    }
    r
}

impl RotationField {
    pub fn eval(&self, x: f64) -> Mat3 {
        match self {
            RotationField::Identity => Mat3::identity(),
            RotationField::Constant(r) => *r,
            RotationField::Helical { base, curvature } => base * rotation_exp(&(curvature * x)),
            RotationField::Sampled { xs, values } => {
                let (k, t) = bracket(xs, x);
                if t == 0.0 {
                    values[k]
                } else if t == 1.0 {
                    values[k + 1]
                } else {
                    project_rotation(&(values[k] * (1.0 - t) + values[k + 1] * t))
                }
            }
        }
    }

    /// Curvature-twist vector `vec(R^T dR/dx)`.
    pub fn curvature(&self, x: f64) -> Vec3 {
        match self {
            RotationField::Identity | RotationField::Constant(_) => Vec3::zeros(),
            RotationField::Helical { curvature, .. } => *curvature,
            RotationField::Sampled { xs, values } => {
                let derivs = fd_derivative(xs, values);
                let at = |k: usize| {
                    let skew = skew_part(&(values[k].transpose() * derivs[k]));
                    vec_of_skew(&skew).expect("skew projection")
                };
                let (k, t) = bracket(xs, x);
                if t == 0.0 {
                    at(k)
                } else if t == 1.0 {
                    at(k + 1)
                } else {
                    at(k) * (1.0 - t) + at(k + 1) * t
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, RotationField::Identity | RotationField::Constant(_))
    }

    fn validate(&self, length: f64) -> Result<(), BeamError> {
        let check_rot = |r: &Mat3| -> Result<(), BeamError> {
            let defect = (r.transpose() * r - Mat3::identity()).norm();
            if defect > linalg::SYM_TOL {
                return Err(BeamError::Invalid(format!(
                    "rotation sample is not orthonormal (|R^T R - I| = {defect:.3e})"
                )));
            }
            if r.determinant() <= 0.0 {
                return Err(BeamError::Invalid("rotation sample has negative determinant".into()));
            }
            Ok(())
        };
        match self {
            RotationField::Identity => Ok(()),
            RotationField::Constant(r) => check_rot(r),
            RotationField::Helical { base, .. } => check_rot(base),
            RotationField::Sampled { xs, values } => {
                if xs.len() < 3 || xs.len() != values.len() {
                    return Err(BeamError::Invalid(
                        "sampled rotation needs at least three samples".into(),
                    ));
                }
                if !xs.windows(2).all(|w| w[1] > w[0]) {
                    return Err(BeamError::Invalid("rotation grid not ascending".into()));
                }
                let tol = 1e-9 * length.max(1.0);
                if xs[0] > tol || (length - xs[xs.len() - 1]).abs() > tol {
                    return Err(BeamError::Invalid("rotation grid must cover the beam".into()));
                }
                values.iter().try_for_each(check_rot)
            }
        }
    }
}

/// Physical description of one beam.
#[derive(Debug, Clone)]
pub struct BeamParams {
    /// Length in meters.
    pub length: f64,
    /// Mass matrix field `M(x)`.
    pub mass: ParamField,
    /// Flexibility matrix field `C(x)`.
    pub flexibility: ParamField,
    /// Reference rotation `R(x)`; its derivative fixes the curvature field.
    pub rotation: RotationField,
}

impl BeamParams {
    /// Straight untwisted beam with unit mass and flexibility.
    pub fn unit(length: f64) -> Self {
        BeamParams {
            length,
            mass: ParamField::Constant(Mat6::identity()),
            flexibility: ParamField::Constant(Mat6::identity()),
            rotation: RotationField::Identity,
        }
    }

    pub fn validate(&self) -> Result<(), BeamError> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(BeamError::Invalid("beam length must be positive".into()));
        }
        self.mass.validate(self.length, "mass matrix")?;
        self.flexibility.validate(self.length, "flexibility matrix")?;
        self.rotation.validate(self.length)
    }

    fn check_domain(&self, x: f64) -> Result<(), BeamError> {
        let slack = 1e-12 * self.length.max(1.0);
        if x < -slack || x > self.length + slack {
            return Err(BeamError::OutOfDomain { x, length: self.length });
        }
        Ok(())
    }

    pub fn mass_at(&self, x: f64) -> Mat6 {
        self.mass.eval(x)
    }

    pub fn flexibility_at(&self, x: f64) -> Mat6 {
        self.flexibility.eval(x)
    }

    pub fn rotation_at(&self, x: f64) -> Mat3 {
        self.rotation.eval(x)
    }

    /// Block rotation `diag(R, R)` used by the nodal conditions.
    pub fn block_rotation_at(&self, x: f64) -> Mat6 {
        let r = self.rotation.eval(x);
        let mut out = Mat6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        out
    }

    pub fn curvature_at(&self, x: f64) -> Vec3 {
        self.rotation.curvature(x)
    }

    /// Initial curvature-twist matrix built from `hat(curvature)` and
    /// `hat(e1)` blocks.
    pub fn initial_twist(&self, x: f64) -> Result<Mat6, BeamError> {
        self.check_domain(x)?;
        let kappa = hat(&self.curvature_at(x));
        let mut e = Mat6::zeros();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&kappa);
        e.fixed_view_mut::<3, 3>(3, 3).copy_from(&kappa);
        e.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&Vec3::x()));
        Ok(e)
    }

    /// Transport coefficient `[[0, -M^-1], [-C^-1, 0]]`.
    pub fn transport(&self, x: f64) -> Result<Mat12, BeamError> {
        self.check_domain(x)?;
        let m_inv = spd_power(&self.mass_at(x), SpdPower::Inv)?;
        let c_inv = spd_power(&self.flexibility_at(x), SpdPower::Inv)?;
        let mut a = Mat12::zeros();
        a.fixed_view_mut::<6, 6>(0, 6).copy_from(&(-m_inv));
        a.fixed_view_mut::<6, 6>(6, 0).copy_from(&(-c_inv));
        Ok(a)
    }

    /// Lower-order coefficient `[[0, -M^-1 E], [C^-1 E^T, 0]]`.
    pub fn lower_order(&self, x: f64) -> Result<Mat12, BeamError> {
        self.check_domain(x)?;
        let e = self.initial_twist(x)?;
        let m_inv = spd_power(&self.mass_at(x), SpdPower::Inv)?;
        let c_inv = spd_power(&self.flexibility_at(x), SpdPower::Inv)?;
        let mut b = Mat12::zeros();
        b.fixed_view_mut::<6, 6>(0, 6).copy_from(&(-m_inv * e));
        b.fixed_view_mut::<6, 6>(6, 0).copy_from(&(c_inv * e.transpose()));
        Ok(b)
    }

    /// Quadratic source evaluated at a state vector.
    pub fn quadratic_source(&self, x: f64, u: &Vec12) -> Result<Vec12, BeamError> {
        self.check_domain(x)?;
        let m = self.mass_at(x);
        let c = self.flexibility_at(x);
        let m_inv = spd_power(&m, SpdPower::Inv)?;
        let c_inv = spd_power(&c, SpdPower::Inv)?;
        Ok(quadratic_source_raw(&m, &c, &m_inv, &c_inv, u))
    }

    /// Twelve symmetric matrices `G^m` with `<u, G^m u>` equal to component
    /// `m` of the quadratic source; built by polarization, which is exact for
    /// a homogeneous quadratic.
    pub fn source_forms(&self, x: f64) -> Result<[Mat12; 12], BeamError> {
        self.check_domain(x)?;
        let m = self.mass_at(x);
        let c = self.flexibility_at(x);
        let m_inv = spd_power(&m, SpdPower::Inv)?;
        let c_inv = spd_power(&c, SpdPower::Inv)?;
        let g = |u: &Vec12| quadratic_source_raw(&m, &c, &m_inv, &c_inv, u);

        let mut basis_vals = [Vec12::zeros(); 12];
        for (j, val) in basis_vals.iter_mut().enumerate() {
            let mut e = Vec12::zeros();
            e[j] = 1.0;
            *val = g(&e);
        }
        let mut forms = [Mat12::zeros(); 12];
        for j in 0..12 {
            for k in j..12 {
                let mut ejk = Vec12::zeros();
                ejk[j] += 1.0;
                ejk[k] += 1.0;
                let pair = g(&ejk);
                for m_idx in 0..12 {
                    let bilinear = if j == k {
                        basis_vals[j][m_idx]
                    } else {
                        0.5 * (pair[m_idx] - basis_vals[j][m_idx] - basis_vals[k][m_idx])
                    };
                    forms[m_idx][(j, k)] = bilinear;
                    forms[m_idx][(k, j)] = bilinear;
                }
            }
        }
        Ok(forms)
    }

    /// Energy weight `diag(M, C)`.
    pub fn energy_weight(&self, x: f64) -> Result<Mat12, BeamError> {
        self.check_domain(x)?;
        let mut q = Mat12::zeros();
        q.fixed_view_mut::<6, 6>(0, 0).copy_from(&self.mass_at(x));
        q.fixed_view_mut::<6, 6>(6, 6).copy_from(&self.flexibility_at(x));
        Ok(q)
    }
}

/// Quadratic source from pre-inverted parameter matrices. The bracketed
/// factor collects the cross-product couplings of the twelve states.
pub fn quadratic_source_raw(
    mass: &Mat6,
    flex: &Mat6,
    mass_inv: &Mat6,
    flex_inv: &Mat6,
    u: &Vec12,
) -> Vec12 {
    let u1 = Vec3::new(u[0], u[1], u[2]);
    let u2 = Vec3::new(u[3], u[4], u[5]);
    let u3 = Vec3::new(u[6], u[7], u[8]);
    let u4 = Vec3::new(u[9], u[10], u[11]);

    let qv = mass * u.fixed_rows::<6>(0);
    let qz = flex * u.fixed_rows::<6>(6);
    let q1 = Vec3::new(qv[0], qv[1], qv[2]);
    let q2 = Vec3::new(qv[3], qv[4], qv[5]);
    let q3 = Vec3::new(qz[0], qz[1], qz[2]);
    let q4 = Vec3::new(qz[3], qz[4], qz[5]);

    let row1 = u2.cross(&q1) + u3.cross(&q4);
    let row2 = u1.cross(&q1) + u2.cross(&q2) + u3.cross(&q3) + u4.cross(&q4);
    let row3 = u2.cross(&q3) + u1.cross(&q4);
    let row4 = u2.cross(&q4);

    let mut top = Vec6::zeros();
    top.fixed_rows_mut::<3>(0).copy_from(&row1);
    top.fixed_rows_mut::<3>(3).copy_from(&row2);
    let mut bottom = Vec6::zeros();
    bottom.fixed_rows_mut::<3>(0).copy_from(&row3);
    bottom.fixed_rows_mut::<3>(3).copy_from(&row4);

    let out_top = -(mass_inv * top);
    let out_bottom = -(flex_inv * bottom);
    let mut out = Vec12::zeros();
    out.fixed_rows_mut::<6>(0).copy_from(&out_top);
    out.fixed_rows_mut::<6>(6).copy_from(&out_bottom);
    out
}

/// Per-beam state samples on a shared uniform grid, velocities in the first
/// six components and internal forces/moments in the last six.
#[derive(Debug, Clone)]
pub struct PhysState {
    pub per_beam: Vec<Vec<Vec12>>,
}

impl PhysState {
    pub fn zeros(points_per_beam: &[usize]) -> Self {
        PhysState {
            per_beam: points_per_beam.iter().map(|&n| vec![Vec12::zeros(); n]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.per_beam.iter().flatten().all(|y| y.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.per_beam
            .iter()
            .flatten()
            .flat_map(|y| y.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Velocity half of a state vector.
pub fn velocity_part(y: &Vec12) -> Vec6 {
    y.fixed_rows::<6>(0).into_owned()
}

/// Internal force/moment half of a state vector.
pub fn forces_part(y: &Vec12) -> Vec6 {
    y.fixed_rows::<6>(6).into_owned()
}

/// Time derivative obtained from the governing equation,
/// `dy/dt = -A dy/dx - B y + g(x, y)`, with the space derivative from
/// second-order finite differences on the sample grid.
pub fn time_derivative(
    params: &BeamParams,
    xs: &[f64],
    ys: &[Vec12],
) -> Result<Vec<Vec12>, BeamError> {
    let dy_dx = fd_derivative(xs, ys);
    let mut out = Vec::with_capacity(ys.len());
    for ((x, y), dy) in xs.iter().zip(ys).zip(&dy_dx) {
        let a = params.transport(*x)?;
        let b = params.lower_order(*x)?;
        let g = params.quadratic_source(*x, y)?;
        out.push(-(a * dy) - b * y + g);
    }
    Ok(out)
}
