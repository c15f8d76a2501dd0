//! SO(3), SE(3) and S² helpers.
//!
//! Conventions: `Exp`/`Log` map between rotation vectors and rotation
//! matrices, perturbations are applied on the right (`R ⊞ δ = R Exp(δ)`), and
//! twists are ordered `[ρ; φ]` with the translational part first.

use nalgebra::{Matrix3, Matrix3x2, Matrix6, Rotation3, SVD, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Below this angle the closed forms switch to second-order Taylor series.
pub const ANGLE_EPS: f64 = 1e-8;
/// `Log` refuses rotations whose angle is this close to π.
pub const PI_MARGIN: f64 = 1e-6;
const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    NearPi(f64),
    #[error("right Jacobian inverse undefined for |phi| = {0} (needs |phi| < pi)")]
    JacobianDomain(f64),
    #[error("matrix is not a rotation: |RᵀR - I| = {orthogonality:e}, det = {det}")]
    NotRotation { orthogonality: f64, det: f64 },
    #[error("expected a unit vector, got norm {0}")]
    NotUnit(f64),
}

pub type Result<T> = std::result::Result<T, ManifoldError>;

/// Cross-product matrix: `skew(v) w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    if theta < ANGLE_EPS {
        return Matrix3::identity() + k + k2 * 0.5;
    }
    let t2 = theta * theta;
    Matrix3::identity() + k * (theta.sin() / theta) + k2 * ((1.0 - theta.cos()) / t2)
}

/// Rotation vector of `r`, with angle in `[0, π)`.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let w = vee(r);
    let s = w.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - PI_MARGIN {
        return Err(ManifoldError::NearPi(theta));
    }
    if theta < ANGLE_EPS {
        // θ/sinθ ≈ 1 + θ²/6
        return Ok(w * (1.0 + theta * theta / 6.0));
    }
    if c < -0.5 {
        // sinθ is small relative to its error here; recover the axis from the
        // symmetric part R + Rᵀ = 2cI + 2(1-c)uuᵀ instead.
        let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
        let diag = b.diagonal();
        let i = diag.imax();
        let mut u = b.column(i).normalize();
        if u.dot(&w) < 0.0 {
            u = -u;
        }
        return Ok(u * theta);
    }
    Ok(w * (theta / s))
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let theta = phi.norm();
    if theta >= std::f64::consts::PI {
        return Err(ManifoldError::JacobianDomain(theta));
    }
    let k = skew(phi);
    let k2 = k * k;
    if theta < ANGLE_EPS {
        return Ok(Matrix3::identity() + k * 0.5 + k2 / 12.0);
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Ok(Matrix3::identity() + k * 0.5 + k2 * coef)
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    if theta < ANGLE_EPS {
        return Matrix3::identity() - k * 0.5 + k2 / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - k * ((1.0 - theta.cos()) / t2) + k2 * ((theta - theta.sin()) / (t2 * theta))
}

/// Left Jacobian `V(φ)` that maps the twist's ρ to the translation.
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian(&(-phi))
}

fn left_jacobian_inv(phi: &Vector3<f64>) -> Result<Matrix3<f64>> {
    right_jacobian_inv(&(-phi))
}

/// Orthonormal basis `[n1 n2]` of the plane tangent to the unit sphere at
/// `phi` (assumed unit).
///
/// The seed axis is the canonical axis with the smallest absolute component
/// (lowest index on ties), so `(0,0,1)` maps to `(1,0,0), (0,1,0)`.
pub fn tangent_basis_s2(phi: &Vector3<f64>) -> Result<Matrix3x2<f64>> {
    let norm = phi.norm();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(ManifoldError::NotUnit(norm));
    }
    Ok(tangent_basis_unchecked(phi))
}

pub(crate) fn tangent_basis_unchecked(phi: &Vector3<f64>) -> Matrix3x2<f64> {
    let a = phi.abs();
    let mut idx = 0;
    for i in 1..3 {
        if a[i] < a[idx] {
            idx = i;
        }
    }
    let mut e = Vector3::zeros();
    e[idx] = 1.0;
    let n1 = (e - phi * phi.dot(&e)).normalize();
    let n2 = phi.cross(&n1);
    Matrix3x2::from_columns(&[n1, n2])
}

/// Retraction on S²: `φ ⊞ δ = Exp(N(φ) δ) φ`.
pub fn s2_boxplus(phi: &Vector3<f64>, delta: &nalgebra::Vector2<f64>) -> Vector3<f64> {
    let n = tangent_basis_unchecked(phi);
    so3_exp(&(n * delta)) * phi
}

/// A rotation matrix kept orthonormal by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        Self(so3_exp(phi))
    }

    /// Checks orthonormality and handedness within a loose tolerance and then
    /// projects onto SO(3).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if orthogonality > ORTHO_TOL || det <= 0.0 {
            return Err(ManifoldError::NotRotation { orthogonality, det });
        }
        Ok(Self::project(m))
    }

    /// Nearest rotation in Frobenius norm (polar decomposition).
    pub fn project(m: Matrix3<f64>) -> Self {
        let svd = SVD::new(m, true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd vt");
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self(r)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    /// Intrinsic Z-Y-X (yaw, pitch, roll).
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self(*Rotation3::from_euler_angles(roll, pitch, yaw).matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn log(&self) -> Result<Vector3<f64>> {
        so3_log(&self.0)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    /// `R Exp(δ)`, re-orthonormalized.
    pub fn boxplus(&self, delta: &Vector3<f64>) -> Self {
        Self::project(self.0 * so3_exp(delta))
    }

    /// `Log(selfᵀ other)`, the right-perturbation from `self` to `other`.
    pub fn boxminus(&self, other: &Rotation) -> Result<Vector3<f64>> {
        so3_log(&(self.0.transpose() * other.0))
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Angle of the relative rotation to `other`, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let c = (((self.0.transpose() * other.0).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = vee(&(self.0.transpose() * other.0)).norm();
        s.atan2(c)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose { rotation: rt, translation: -(rt.matrix() * self.translation) }
    }

    /// Right perturbation by a twist `[ρ; φ]`: `R ← R Exp(φ)`, `t ← t + R ρ`.
    ///
    /// This is the local parameterization used by registration; it is not
    /// `self ∘ se3_exp(ξ)` but agrees with it to first order.
    pub fn boxplus(&self, xi: &Twist) -> Pose {
        Pose {
            rotation: self.rotation.boxplus(&xi.phi()),
            translation: self.translation + self.rotation.matrix() * xi.rho(),
        }
    }
}

/// Twist `[ρ; φ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
    }

    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn phi(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let phi = xi.phi();
    Pose {
        rotation: Rotation::exp(&phi),
        translation: left_jacobian(&phi) * xi.rho(),
    }
}

pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let phi = pose.rotation.log()?;
    let rho = left_jacobian_inv(&phi)? * pose.translation;
    Ok(Twist::new(rho, phi))
}

/// Adjoint of a pose acting on `[ρ; φ]` twists.
pub fn se3_adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation.matrix();
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&pose.translation) * r));
    ad
}
