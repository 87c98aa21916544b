//! Small dense linear algebra on fixed-size matrices: skew maps, SPD
//! functional calculus, ordered symmetric eigendecompositions and
//! definiteness tests with explicit tolerances.

use nalgebra::{DMatrix, SMatrix, SVector};
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec6 = nalgebra::Vector6<f64>;
pub type Vec12 = SVector<f64, 12>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat12 = SMatrix<f64, 12, 12>;

/// Absolute symmetry tolerance on unit-scaled inputs.
pub const SYM_TOL: f64 = 1e-10;
/// Relative eigenvalue floor below which a matrix is treated as singular.
pub const SPD_REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not skew-symmetric: |M + M^T|_max = {defect:.3e}")]
    NotSkew { defect: f64 },
    #[error("matrix is not symmetric: |M - M^T|_max = {defect:.3e}")]
    NotSymmetric { defect: f64 },
    #[error("matrix is not positive definite: eigenvalues in [{min_eig:.3e}, {max_eig:.3e}]")]
    NotSpd { min_eig: f64, max_eig: f64 },
}

/// Largest absolute entry of `M - M^T`.
pub fn asymmetry<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    let mut defect = 0.0f64;
    for i in 0..N {
        for j in (i + 1)..N {
            defect = defect.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    defect
}

fn require_symmetric<const N: usize>(m: &SMatrix<f64, N, N>) -> Result<(), LinalgError> {
    let defect = asymmetry(m);
    if defect > SYM_TOL {
        return Err(LinalgError::NotSymmetric { defect });
    }
    Ok(())
}

/// Skew-symmetric matrix of the cross product: `hat(u) * z = u x z`.
pub fn hat(u: &Vec3) -> Mat3 {
    Mat3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0)
}

/// Inverse of [`hat`]; the input must be skew-symmetric within `1e-10`.
pub fn vec_of_skew(m: &Mat3) -> Result<Vec3, LinalgError> {
    let mut defect = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            defect = defect.max((m[(i, j)] + m[(j, i)]).abs());
        }
    }
    if defect > SYM_TOL {
        return Err(LinalgError::NotSkew { defect });
    }
    Ok(Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Orthogonal projection of a square matrix onto its skew-symmetric part.
pub fn skew_part(m: &Mat3) -> Mat3 {
    0.5 * (m - m.transpose())
}

/// Ordered eigendecomposition of a symmetric 6x6 matrix.
///
/// Eigenvalues ascend and each eigenvector is normalized so that its entry
/// of largest magnitude is positive, which makes the decomposition a
/// deterministic function of the input.
#[derive(Debug, Clone)]
pub struct SymEig6 {
    /// Eigenvalues in ascending order.
    pub values: Vec6,
    /// Orthonormal eigenvectors, column `j` paired with `values[j]`.
    pub vectors: Mat6,
}

impl SymEig6 {
    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> Mat6 {
        self.vectors * Mat6::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

/// Eigendecomposition with the ordering and sign conventions of [`SymEig6`].
pub fn sym_eig6(m: &Mat6) -> Result<SymEig6, LinalgError> {
    require_symmetric(m)?;
    let sym = m.symmetric_part();
    let eig = sym.symmetric_eigen();

    let mut order: [usize; 6] = [0, 1, 2, 3, 4, 5];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut values = Vec6::zeros();
    let mut vectors = Mat6::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        let mut lead = 0;
        for i in 1..6 {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col = -col;
        }
        vectors.set_column(dst, &col);
    }
    Ok(SymEig6 { values, vectors })
}

/// Exponents supported by [`spd_power`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdPower {
    /// `M^-1`
    Inv,
    /// `M^-1/2`
    InvSqrt,
    /// `M^1/2`
    Sqrt,
}

impl SpdPower {
    fn apply(self, lambda: f64) -> f64 {
        match self {
            SpdPower::Inv => 1.0 / lambda,
            SpdPower::InvSqrt => 1.0 / lambda.sqrt(),
            SpdPower::Sqrt => lambda.sqrt(),
        }
    }
}

/// Fractional power of a symmetric positive definite matrix through its
/// eigendecomposition. Rejects inputs whose smallest eigenvalue falls under
/// `1e-12` times the largest.
pub fn spd_power(m: &Mat6, p: SpdPower) -> Result<Mat6, LinalgError> {
    let eig = sym_eig6(m)?;
    let min_eig = eig.values[0];
    let max_eig = eig.values[5];
    if !(max_eig > 0.0 && min_eig > SPD_REL_FLOOR * max_eig) {
        return Err(LinalgError::NotSpd { min_eig, max_eig });
    }
    let powered = Vec6::from_fn(|i, _| p.apply(eig.values[i]));
    let out = eig.vectors * Mat6::from_diagonal(&powered) * eig.vectors.transpose();
    Ok(out.symmetric_part())
}

/// Classification of a symmetric matrix by the signs of its spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Definiteness {
    PositiveDefinite,
    NegativeDefinite,
    Semidefinite,
    Indefinite,
}

/// Definiteness class together with the quantitative slack behind it.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DefinitenessReport {
    pub class: Definiteness,
    /// Distance of the critical eigenvalue from zero.
    pub margin: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

/// Eigenvalue-based definiteness test for a symmetric matrix of any size.
pub fn definiteness_dyn(m: &DMatrix<f64>, tol: f64) -> Result<DefinitenessReport, LinalgError> {
    let mut defect = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            defect = defect.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if defect > SYM_TOL {
        return Err(LinalgError::NotSymmetric { defect });
    }
    let eigs = m.symmetric_part().symmetric_eigenvalues();
    let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eig = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let (class, margin) = if min_eig > tol {
        (Definiteness::PositiveDefinite, min_eig)
    } else if max_eig < -tol {
        (Definiteness::NegativeDefinite, -max_eig)
    } else if min_eig < -tol && max_eig > tol {
        (Definiteness::Indefinite, min_eig.abs().min(max_eig))
    } else {
        // The critical eigenvalue sits inside [-tol, tol].
        let critical = if min_eig.abs() <= max_eig.abs() { min_eig } else { max_eig };
        (Definiteness::Semidefinite, critical.abs())
    };
    Ok(DefinitenessReport { class, margin, min_eig, max_eig })
}

/// [`definiteness_dyn`] for statically sized matrices.
pub fn definiteness<const N: usize>(
    m: &SMatrix<f64, N, N>,
    tol: f64,
) -> Result<DefinitenessReport, LinalgError> {
    let dynm = DMatrix::from_fn(N, N, |i, j| m[(i, j)]);
    definiteness_dyn(&dynm, tol)
}

fn sym_eigenvalues_dyn<const N: usize>(m: &SMatrix<f64, N, N>) -> Vec<f64> {
    let dynm = DMatrix::from_fn(N, N, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    dynm.symmetric_eigenvalues().iter().cloned().collect()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    sym_eigenvalues_dyn(m).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    sym_eigenvalues_dyn(m).into_iter().fold(f64::INFINITY, f64::min)
}

/// Operator (spectral) norm of a dynamically sized matrix.
pub fn op_norm_dyn(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    gram.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}
