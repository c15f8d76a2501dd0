//! Point-to-plane ICP on SE(3) and the bounded-noise uncertainty of its result.

use nalgebra::{Cholesky, Matrix3, Matrix6, Matrix6x3, RowVector6, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::ellipsoid::MinkowskiAccumulator;
use crate::manifold::{se3_exp, skew, Pose, Twist};
use crate::mapping::{PlaneParams, PointMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("no points to register")]
    EmptyInput,
    #[error("map is empty")]
    EmptyMap,
    #[error("degenerate registration: {found} plane correspondences, need {needed}")]
    Degenerate { found: usize, needed: usize },
    #[error("ill-conditioned registration: Hessian condition number {cond:e} exceeds {cond_max:e}")]
    IllConditioned { cond: f64, cond_max: f64 },
    #[error("registration did not converge")]
    NotConverged,
}

pub type Result<T> = std::result::Result<T, RegistrationError>;

/// A scan point (IMU frame, with its noise shape) matched to a map plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point_i: Vector3<f64>,
    pub point_shape_i: Matrix3<f64>,
    pub normal_w: Vector3<f64>,
    pub anchor_w: Vector3<f64>,
}

impl Correspondence {
    pub fn residual(&self, pose: &Pose) -> f64 {
        self.normal_w.dot(&(pose.transform_point(&self.point_i) - self.anchor_w))
    }

    /// Row `[uᵀR, -uᵀR p^]` of the residual Jacobian under `T ← T Exp(ξ)`.
    pub fn jacobian(&self, pose: &Pose) -> RowVector6<f64> {
        let b = pose.rotation.matrix().transpose() * self.normal_w;
        let rot = self.point_i.cross(&b);
        RowVector6::new(b.x, b.y, b.z, rot.x, rot.y, rot.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    pub converge_tol: f64,
    pub min_correspondences: usize,
    pub cond_max: f64,
    pub max_halvings: usize,
    /// Once an accepted step is shorter than this, correspondences are held
    /// fixed for the rest of the solve. Stops nearest-neighbor flips from
    /// trapping the iteration in a cycle. Zero refreshes every iteration.
    pub freeze_tol: f64,
    pub plane: PlaneParams,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            converge_tol: 1e-6,
            min_correspondences: 10,
            cond_max: 1e8,
            max_halvings: 4,
            freeze_tol: 1e-3,
            plane: PlaneParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpIteration {
    pub correspondences: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    pub step_norm: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    pub correspondences: Vec<Correspondence>,
    pub last_increment: Twist,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IcpIteration>,
}

pub fn cost(correspondences: &[Correspondence], pose: &Pose) -> f64 {
    correspondences.iter().map(|c| c.residual(pose).powi(2)).sum()
}

/// Normal equations `(H, g)` of the linearized problem at `pose`.
pub fn normal_equations(correspondences: &[Correspondence], pose: &Pose) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in correspondences {
        let j = c.jacobian(pose);
        let r = c.residual(pose);
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    (h, g)
}

fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = h.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 { f64::INFINITY } else { hi / lo }
}

/// One Gauss-Newton increment `-H⁻¹ g` for fixed correspondences.
pub fn gauss_newton_step(correspondences: &[Correspondence], pose: &Pose, cond_max: f64) -> Result<Twist> {
    let (h, g) = normal_equations(correspondences, pose);
    let cond = condition_number(&h);
    if !(cond <= cond_max) {
        return Err(RegistrationError::IllConditioned { cond, cond_max });
    }
    let ch = Cholesky::new(h).ok_or(RegistrationError::IllConditioned { cond, cond_max })?;
    Ok(Twist(-ch.solve(&g)))
}

/// Matches every point against the map at `pose`, dropping planes farther
/// than `max_plane_dist` from the point. Order follows `points`.
pub fn find_correspondences(
    points: &[(Vector3<f64>, Matrix3<f64>)],
    map: &PointMap,
    pose: &Pose,
    params: &PlaneParams,
) -> Vec<Correspondence> {
    points
        .par_iter()
        .map(|(p, shape)| {
            let q = pose.transform_point(p);
            map.query_plane(&q, params)
                .filter(|fit| fit.normal.dot(&(q - fit.anchor)).abs() <= params.max_plane_dist)
                .map(|fit| Correspondence { point_i: *p, point_shape_i: *shape, normal_w: fit.normal, anchor_w: fit.anchor })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Gauss-Newton point-to-plane registration of IMU-frame points against the
/// map, starting from `initial` (IMU-to-world).
///
/// A step that raises the cost is halved up to `max_halvings` times; if it
/// still does not help, the iteration stops without applying it.
pub fn icp_point_to_plane(
    points: &[(Vector3<f64>, Matrix3<f64>)],
    map: &PointMap,
    initial: &Pose,
    params: &IcpParams,
) -> Result<IcpResult> {
    if points.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    if map.is_empty() {
        return Err(RegistrationError::EmptyMap);
    }
    let mut pose = *initial;
    let mut history = Vec::new();
    let mut last = Twist::zero();
    let mut correspondences = Vec::new();
    let mut converged = false;
    let mut frozen = false;
    for _ in 0..params.max_iterations {
        if !frozen {
            correspondences = find_correspondences(points, map, &pose, &params.plane);
            if correspondences.len() < params.min_correspondences {
                return Err(RegistrationError::Degenerate { found: correspondences.len(), needed: params.min_correspondences });
            }
        }
        let step = gauss_newton_step(&correspondences, &pose, params.cond_max)?;
        let cost_before = cost(&correspondences, &pose);
        let mut scaled = step;
        let mut halvings = 0;
        let mut candidate = pose.compose(&se3_exp(&scaled));
        let mut cost_after = cost(&correspondences, &candidate);
        while cost_after > cost_before && halvings < params.max_halvings {
            halvings += 1;
            scaled = Twist(scaled.0 * 0.5);
            candidate = pose.compose(&se3_exp(&scaled));
            cost_after = cost(&correspondences, &candidate);
        }
        last = scaled;
        let accepted = cost_after <= cost_before;
        history.push(IcpIteration {
            correspondences: correspondences.len(),
            cost_before,
            cost_after: if accepted { cost_after } else { cost_before },
            step_norm: scaled.norm(),
            halvings,
        });
        if accepted {
            pose = candidate;
            frozen = frozen || scaled.norm() < params.freeze_tol;
        }
        if scaled.norm() < params.converge_tol {
            converged = true;
            break;
        }
        if !accepted {
            break;
        }
    }
    Ok(IcpResult { pose, correspondences, last_increment: last, iterations: history.len(), converged, history })
}

/// How the linearization-error compensation enters the uncertainty sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonlinearTerm {
    /// One copy of `P^nl` per correspondence.
    #[default]
    PerPoint,
    /// A single copy of `P^nl`.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpUncertainty {
    /// Shape bounding the increment `ξ` with `T_true = T̃ Exp(ξ)`, ordered `[ρ; φ]`.
    pub shape_xi: Matrix6<f64>,
}

impl IcpUncertainty {
    pub fn translation_block(&self) -> Matrix3<f64> {
        self.shape_xi.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn rotation_block(&self) -> Matrix3<f64> {
        self.shape_xi.fixed_view::<3, 3>(3, 3).into_owned()
    }
}

/// Default compensation shape: `diag(3·(1e-4)²)` on every twist axis.
pub fn default_p_nl() -> Matrix6<f64> {
    Matrix6::identity() * 3e-8
}

/// `∂G/∂ξ` of the stationarity condition `G = Σ J_iᵀ r_i = 0`: the
/// Gauss-Newton `H` plus the residual-weighted change of the Jacobians,
/// `Σ r_i [0, b^; 0, p^ b^]`. Symmetric at an exact optimum.
pub fn stationarity_hessian(correspondences: &[Correspondence], pose: &Pose) -> Matrix6<f64> {
    let (mut h, _) = normal_equations(correspondences, pose);
    let r_t = pose.rotation.matrix().transpose();
    for c in correspondences {
        let b = r_t * c.normal_w;
        let r = c.residual(pose);
        let bx = skew(&b);
        let mut top = h.fixed_view_mut::<3, 3>(0, 3);
        top += bx * r;
        let mut bottom = h.fixed_view_mut::<3, 3>(3, 3);
        bottom += skew(&c.point_i) * bx * r;
    }
    (h + h.transpose()) * 0.5
}

/// `∂ξ/∂p_i` at the optimum for every correspondence.
///
/// Differentiating the stationarity condition `Σ J_iᵀ r_i = 0` with respect
/// to the IMU-frame point gives `-H̄⁻¹ [b bᵀ ; p^ b bᵀ - r_i b^]` with
/// `b = Rᵀu_i` and `H̄` from [`stationarity_hessian`]. Falls back to the
/// Gauss-Newton `H` if `H̄` is not positive definite.
pub fn point_jacobians(result: &IcpResult) -> Result<Vec<Matrix6x3<f64>>> {
    let pose = &result.pose;
    let full = stationarity_hessian(&result.correspondences, pose);
    let ch = match Cholesky::new(full) {
        Some(ch) => ch,
        None => {
            let (h, _) = normal_equations(&result.correspondences, pose);
            let cond = condition_number(&h);
            Cholesky::new(h).ok_or(RegistrationError::IllConditioned { cond, cond_max: f64::INFINITY })?
        }
    };
    let h_inv = ch.inverse();
    let r_t = pose.rotation.matrix().transpose();
    Ok(result
        .correspondences
        .par_iter()
        .map(|c| {
            let b = r_t * c.normal_w;
            let bbt = b * b.transpose();
            let r = c.residual(pose);
            let mut m = Matrix6x3::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&bbt);
            m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&c.point_i) * bbt - skew(&b) * r));
            -(h_inv * m)
        })
        .collect())
}

/// Shape bounding the registration error given per-point noise shapes.
pub fn resolve_icp_uncertainty(result: &IcpResult, p_nl: &Matrix6<f64>, mode: NonlinearTerm) -> Result<IcpUncertainty> {
    if !result.converged {
        return Err(RegistrationError::NotConverged);
    }
    let jacobians = point_jacobians(result)?;
    let shapes: Vec<Matrix6<f64>> = jacobians
        .par_iter()
        .zip(result.correspondences.par_iter())
        .map(|(j, c)| j * c.point_shape_i * j.transpose())
        .collect();
    let mut acc = MinkowskiAccumulator::new(6);
    for s in &shapes {
        acc.add_shape(s);
    }
    let copies = match mode {
        NonlinearTerm::PerPoint => result.correspondences.len(),
        NonlinearTerm::Single => 1,
    };
    acc.add_shape_copies(p_nl, copies);
    let e = acc.finish().map_err(|_| RegistrationError::EmptyInput)?;
    Ok(IcpUncertainty { shape_xi: Matrix6::from_column_slice(e.shape().as_slice()) })
}

/// Accept the registration only when it converged with a small final step.
pub fn gate_icp(result: &IcpResult, gate_tol: f64) -> bool {
    result.converged && result.last_increment.norm() <= gate_tol
}
