//! On-manifold ellipsoidal set-membership filter.
//!
//! The nominal state `(t, v, R)` is propagated with the IMU and corrected with
//! registered scans. Three ellipsoids bound the error state
//! `δt = t - t̂`, `δv = v - v̂` (world frame) and `δθ = Log(R̂ᵀR)` (body
//! frame). After every update the set centers are folded into the nominal
//! state and reset to zero.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::ellipsoid::{intersect_outer, Ellipsoid, EllipsoidError, IntersectOptions, MinkowskiAccumulator, PSD_FLOOR};
use crate::manifold::{right_jacobian_inv, so3_exp, skew, ManifoldError, Pose, Rotation};
use crate::registration::IcpUncertainty;
use crate::sensing::{ImuNoiseSpec, ImuSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("time step {dt} s outside (0, {dt_max}] s")]
    Timing { dt: f64, dt_max: f64 },
    #[error("inconsistent {component} observation: {source}")]
    Inconsistent {
        component: Component,
        #[source]
        source: EllipsoidError,
    },
    #[error("rotation observation out of range: {0}")]
    Rotation(#[from] ManifoldError),
    #[error("set algebra failure: {0}")]
    Set(#[from] EllipsoidError),
}

pub type Result<T> = std::result::Result<T, FilterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Translation,
    Velocity,
    Rotation,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::Translation => "translation",
            Component::Velocity => "velocity",
            Component::Rotation => "rotation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub rotation: Rotation,
}

impl NavState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateBounds {
    pub t_set: Ellipsoid,
    pub v_set: Ellipsoid,
    pub theta_set: Ellipsoid,
}

fn centered3(shape: &Matrix3<f64>) -> Result<Ellipsoid> {
    Ok(Ellipsoid::centered(DMatrix::from_column_slice(3, 3, shape.as_slice()))?)
}

fn shape3(e: &Ellipsoid) -> Matrix3<f64> {
    Matrix3::from_column_slice(e.shape().as_slice())
}

fn center3(e: &Ellipsoid) -> Vector3<f64> {
    Vector3::from_column_slice(e.center().as_slice())
}

impl StateBounds {
    pub fn from_shapes(t: &Matrix3<f64>, v: &Matrix3<f64>, theta: &Matrix3<f64>) -> Result<Self> {
        Ok(Self { t_set: centered3(t)?, v_set: centered3(v)?, theta_set: centered3(theta)? })
    }

    /// Every set at the smallest admissible shape.
    pub fn floor() -> Self {
        let e = Ellipsoid::point(DVector::zeros(3));
        Self { t_set: e.clone(), v_set: e.clone(), theta_set: e }
    }

    pub fn t_shape(&self) -> Matrix3<f64> {
        shape3(&self.t_set)
    }

    pub fn v_shape(&self) -> Matrix3<f64> {
        shape3(&self.v_set)
    }

    pub fn theta_shape(&self) -> Matrix3<f64> {
        shape3(&self.theta_set)
    }

    pub fn centers_are_zero(&self) -> bool {
        [&self.t_set, &self.v_set, &self.theta_set].iter().all(|e| e.center().iter().all(|&c| c == 0.0))
    }
}

/// Global protection level: running bounds plus the closing bounds of every
/// finished local map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectionLevel {
    pub translation_set: Ellipsoid,
    pub velocity_set: Ellipsoid,
    pub rotation_set: Ellipsoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMapRecord {
    pub index: usize,
    pub origin: Vector3<f64>,
    pub closing: StateBounds,
}

/// Accelerometer and gyroscope biases removed before integration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBiases {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

fn msum(shapes: &[Matrix3<f64>]) -> Result<Ellipsoid> {
    let mut acc = MinkowskiAccumulator::new(3);
    for s in shapes {
        acc.add_shape(s);
    }
    Ok(acc.finish()?)
}

/// Propagates the nominal state and the error bounds across one IMU interval
/// of length `dt`, holding `imu` constant over it.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    state: &NavState,
    bounds: &StateBounds,
    imu: &ImuSample,
    biases: &ImuBiases,
    noise: &ImuNoiseSpec,
    dt: f64,
    dt_max: f64,
    gravity: &Vector3<f64>,
) -> Result<(NavState, StateBounds)> {
    if !(dt > 0.0 && dt <= dt_max) {
        return Err(FilterError::Timing { dt, dt_max });
    }
    let r = state.rotation.matrix();
    let a = imu.accel - biases.accel;
    let w = imu.gyro - biases.gyro;
    let acc_w = r * a + gravity;
    let next = NavState {
        timestamp: state.timestamp + dt,
        translation: state.translation + state.velocity * dt + acc_w * (0.5 * dt * dt),
        velocity: state.velocity + acc_w * dt,
        rotation: state.rotation.boxplus(&(w * dt)),
    };

    let dt2 = dt * dt;
    let c = -(r * skew(&a)) * dt;
    let d = -r * dt;
    let e = so3_exp(&(-w * dt));
    let pt = bounds.t_shape();
    let pv = bounds.v_shape();
    let pth = bounds.theta_shape();
    let t_set = msum(&[pt, pv * dt2])?;
    let v_set = msum(&[pv, c * pth * c.transpose(), d * noise.p_ba * d.transpose(), noise.n_a() * dt2])?;
    let theta_set = msum(&[e * pth * e.transpose(), noise.p_bg * dt2, noise.n_g() * dt2])?;
    Ok((next, StateBounds { t_set, v_set, theta_set }))
}

/// Upper bound on the norm of the true world-frame acceleration at the IMU
/// sample, given the nominal state and the error bounds.
pub fn accel_bound(
    state: &NavState,
    bounds: &StateBounds,
    imu: &ImuSample,
    biases: &ImuBiases,
    noise: &ImuNoiseSpec,
    gravity: &Vector3<f64>,
) -> f64 {
    let radius = |m: Matrix3<f64>| m.trace().max(0.0).sqrt();
    let a = imu.accel - biases.accel;
    (state.rotation.matrix() * a + gravity).norm()
        + a.norm() * radius(bounds.theta_shape())
        + radius(noise.p_ba)
        + radius(noise.n_a())
}

/// Last accepted registration, kept for the velocity observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrevIcp {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    /// World-frame translation shape.
    pub shape_t: Matrix3<f64>,
    /// Bound on the true acceleration norm seen by predictions since then.
    pub max_accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisjointPolicy {
    /// Keep the prediction for the offending component and log a warning.
    #[default]
    Skip,
    /// Abort the update.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Applied,
    /// No observation available (velocity before the second registration).
    Unavailable,
    /// Observation and prediction were disjoint; prediction kept.
    Disjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateReport {
    pub translation: Outcome,
    pub velocity: Outcome,
    pub rotation: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOptions {
    pub policy: DisjointPolicy,
    pub intersect: IntersectOptions,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self { policy: DisjointPolicy::Skip, intersect: IntersectOptions::default() }
    }
}

fn fuse(
    component: Component,
    predicted: &Ellipsoid,
    center: Vector3<f64>,
    shape: Matrix3<f64>,
    opts: &UpdateOptions,
) -> Result<Option<Ellipsoid>> {
    let obs = Ellipsoid::regularized(
        DVector::from_column_slice(center.as_slice()),
        DMatrix::from_column_slice(3, 3, shape.as_slice()),
    )?;
    match intersect_outer(predicted, &obs, &opts.intersect) {
        Ok(e) => Ok(Some(e)),
        Err(source @ EllipsoidError::Disjoint { .. }) => match opts.policy {
            DisjointPolicy::Strict => Err(FilterError::Inconsistent { component, source }),
            DisjointPolicy::Skip => {
                log::warn!("{component} observation disjoint from prediction ({source}); keeping prediction");
                Ok(None)
            }
        },
        Err(e) => Err(e.into()),
    }
}

/// Corrects the predicted state with a registered pose and its uncertainty.
///
/// Returns the corrected state, reset bounds, what happened to each
/// component, and the registration summary to pass as `prev` next time.
pub fn update(
    state: &NavState,
    bounds: &StateBounds,
    icp_pose: &Pose,
    icp_unc: &IcpUncertainty,
    prev: Option<&PrevIcp>,
    opts: &UpdateOptions,
) -> Result<(NavState, StateBounds, UpdateReport, PrevIcp)> {
    let r_icp = icp_pose.rotation.matrix();
    let q_t = {
        let q = r_icp * icp_unc.translation_block() * r_icp.transpose();
        (q + q.transpose()) * 0.5
    };
    let current = PrevIcp { timestamp: state.timestamp, translation: icp_pose.translation, shape_t: q_t, max_accel: 0.0 };

    let mut out = *state;
    let mut new_bounds = bounds.clone();

    let translation = match fuse(Component::Translation, &bounds.t_set, icp_pose.translation - state.translation, q_t, opts)? {
        Some(e) => {
            out.translation += center3(&e);
            new_bounds.t_set = e;
            Outcome::Applied
        }
        None => Outcome::Disjoint,
    };

    let velocity = match prev {
        Some(p) if state.timestamp > p.timestamp => {
            let dt = state.timestamp - p.timestamp;
            // The difference quotient is the mean velocity over the interval;
            // it differs from the end velocity by at most max_accel * dt / 2.
            let diff = msum(&[q_t, p.shape_t, ball_shape(0.5 * p.max_accel * dt * dt)])?;
            let center = (icp_pose.translation - p.translation) / dt - state.velocity;
            match fuse(Component::Velocity, &bounds.v_set, center, shape3(&diff) / (dt * dt), opts)? {
                Some(e) => {
                    out.velocity += center3(&e);
                    new_bounds.v_set = e;
                    Outcome::Applied
                }
                None => Outcome::Disjoint,
            }
        }
        _ => Outcome::Unavailable,
    };

    let obs_rot = state.rotation.boxminus(&icp_pose.rotation)?;
    let jinv = right_jacobian_inv(&obs_rot)?;
    let q_r = {
        let q = jinv * icp_unc.rotation_block() * jinv.transpose();
        (q + q.transpose()) * 0.5
    };
    let rotation = match fuse(Component::Rotation, &bounds.theta_set, obs_rot, q_r, opts)? {
        Some(e) => {
            out.rotation = state.rotation.boxplus(&center3(&e));
            new_bounds.theta_set = e;
            Outcome::Applied
        }
        None => Outcome::Disjoint,
    };

    let zero = DVector::zeros(3);
    new_bounds.t_set = new_bounds.t_set.recentered(zero.clone())?;
    new_bounds.v_set = new_bounds.v_set.recentered(zero.clone())?;
    new_bounds.theta_set = new_bounds.theta_set.recentered(zero)?;
    Ok((out, new_bounds, UpdateReport { translation, velocity, rotation }, current))
}

/// Minkowski sum of the running bounds with every closing record.
pub fn propagate_global(bounds: &StateBounds, history: &[LocalMapRecord]) -> Result<ProtectionLevel> {
    let sum = |pick: fn(&StateBounds) -> &Ellipsoid| -> Result<Ellipsoid> {
        let mut acc = MinkowskiAccumulator::new(3);
        acc.add(pick(bounds));
        for rec in history {
            acc.add(pick(&rec.closing));
        }
        if history.is_empty() {
            return Ok(pick(bounds).clone());
        }
        Ok(acc.finish()?)
    };
    Ok(ProtectionLevel {
        translation_set: sum(|b| &b.t_set)?,
        velocity_set: sum(|b| &b.v_set)?,
        rotation_set: sum(|b| &b.theta_set)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub dt_max: f64,
    pub local_map_radius: f64,
    pub update: UpdateOptions,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { dt_max: 0.02, local_map_radius: 50.0, update: UpdateOptions::default() }
    }
}

/// The filter as a single-owner state machine.
#[derive(Debug, Clone)]
pub struct SetMembershipFilter {
    pub state: NavState,
    pub bounds: StateBounds,
    pub history: Vec<LocalMapRecord>,
    pub prev_icp: Option<PrevIcp>,
    pub biases: ImuBiases,
    pub noise: ImuNoiseSpec,
    pub gravity: Vector3<f64>,
    pub params: FilterParams,
    local_origin: Vector3<f64>,
}

impl SetMembershipFilter {
    pub fn new(
        state: NavState,
        bounds: StateBounds,
        biases: ImuBiases,
        noise: ImuNoiseSpec,
        gravity: Vector3<f64>,
        params: FilterParams,
    ) -> Self {
        let local_origin = state.translation;
        Self { state, bounds, history: Vec::new(), prev_icp: None, biases, noise, gravity, params, local_origin }
    }

    pub fn predict(&mut self, imu: &ImuSample, dt: f64) -> Result<()> {
        if let Some(prev) = self.prev_icp.as_mut() {
            let a = accel_bound(&self.state, &self.bounds, imu, &self.biases, &self.noise, &self.gravity);
            prev.max_accel = prev.max_accel.max(a);
        }
        let (s, b) = predict(&self.state, &self.bounds, imu, &self.biases, &self.noise, dt, self.params.dt_max, &self.gravity)?;
        self.state = s;
        self.bounds = b;
        Ok(())
    }

    pub fn update(&mut self, icp_pose: &Pose, icp_unc: &IcpUncertainty) -> Result<UpdateReport> {
        let (s, b, report, current) =
            update(&self.state, &self.bounds, icp_pose, icp_unc, self.prev_icp.as_ref(), &self.params.update)?;
        self.state = s;
        self.bounds = b;
        self.prev_icp = Some(current);
        Ok(report)
    }

    /// A gated-out registration breaks the chain of velocity observations.
    pub fn skip_update(&mut self) {
        self.prev_icp = None;
    }

    pub fn protection_level(&self) -> Result<ProtectionLevel> {
        propagate_global(&self.bounds, &self.history)
    }

    pub fn local_origin(&self) -> Vector3<f64> {
        self.local_origin
    }

    /// Closes the current local map once the robot is farther than the
    /// configured radius from its origin: the running bounds are archived and
    /// reset to the floor, and a new local map starts here.
    pub fn maybe_close_local_map(&mut self) -> Option<LocalMapRecord> {
        let position = self.state.translation;
        if (position - self.local_origin).norm() <= self.params.local_map_radius {
            return None;
        }
        let record = LocalMapRecord { index: self.history.len(), origin: self.local_origin, closing: self.bounds.clone() };
        self.history.push(record.clone());
        self.bounds = StateBounds::floor();
        self.local_origin = position;
        Some(record)
    }
}

/// Isotropic shape `r² I` for a ball of radius `r`, never below the floor.
pub fn ball_shape(radius: f64) -> Matrix3<f64> {
    Matrix3::identity() * (radius * radius).max(PSD_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix6;

    fn level_state() -> NavState {
        NavState { timestamp: 0.0, translation: Vector3::zeros(), velocity: Vector3::zeros(), rotation: Rotation::identity() }
    }

    fn g() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -9.81)
    }

    #[test]
    fn stationary_imu_keeps_nominal_state() {
        let biases = ImuBiases { accel: Vector3::new(0.01, -0.02, 0.03), gyro: Vector3::new(0.001, 0.0, -0.002) };
        let state = NavState { rotation: Rotation::exp(&Vector3::new(0.1, -0.2, 0.3)), ..level_state() };
        let imu = ImuSample {
            timestamp: 0.0,
            accel: state.rotation.matrix().transpose() * -g() + biases.accel,
            gyro: biases.gyro,
        };
        let (next, _) = predict(&state, &StateBounds::floor(), &imu, &biases, &ImuNoiseSpec::default(), 0.005, 0.02, &g()).unwrap();
        assert!(next.translation.amax() < 1e-15);
        assert!(next.velocity.amax() < 1e-15);
        assert!(next.rotation.angle_to(&state.rotation) < 1e-15);
    }

    #[test]
    fn translation_bound_doubles_for_equal_traces() {
        let bounds = StateBounds::from_shapes(&Matrix3::identity(), &Matrix3::identity(), &Matrix3::identity()).unwrap();
        let imu = ImuSample { timestamp: 0.0, accel: -g(), gyro: Vector3::zeros() };
        let (_, b) = predict(&level_state(), &bounds, &imu, &ImuBiases::default(), &ImuNoiseSpec::default(), 1.0, 1.0, &g()).unwrap();
        assert!((b.t_shape() - Matrix3::identity() * 4.0).amax() < 1e-12);
    }

    #[test]
    fn tiny_step_barely_changes_anything() {
        let bounds = StateBounds::from_shapes(&Matrix3::identity(), &Matrix3::identity(), &Matrix3::identity()).unwrap();
        let imu = ImuSample { timestamp: 0.0, accel: Vector3::new(0.3, 0.1, 9.0), gyro: Vector3::new(0.1, 0.2, 0.3) };
        let state = NavState { velocity: Vector3::new(1.0, 0.0, 0.0), ..level_state() };
        let dt = 1e-7;
        let (next, b) = predict(&state, &bounds, &imu, &ImuBiases::default(), &ImuNoiseSpec::default(), dt, 0.02, &g()).unwrap();
        assert!((next.translation - state.translation).norm() < 2e-7);
        assert!((b.t_shape() - Matrix3::identity()).amax() < 1e-6);
        assert!((b.theta_shape() - Matrix3::identity()).amax() < 1e-6);
    }

    #[test]
    fn timing_is_checked() {
        let imu = ImuSample { timestamp: 0.0, accel: -g(), gyro: Vector3::zeros() };
        for dt in [0.0, -0.01, 0.05] {
            let r = predict(&level_state(), &StateBounds::floor(), &imu, &ImuBiases::default(), &ImuNoiseSpec::default(), dt, 0.02, &g());
            assert!(matches!(r, Err(FilterError::Timing { .. })));
        }
    }

    #[test]
    fn tight_observation_wins_and_centers_reset() {
        let state = level_state();
        let huge = StateBounds::from_shapes(&(Matrix3::identity() * 100.0), &(Matrix3::identity() * 100.0), &(Matrix3::identity() * 0.5)).unwrap();
        let unc = IcpUncertainty { shape_xi: Matrix6::identity() * 1e-10 };
        let (out, b, report, _) = update(&state, &huge, &state.pose(), &unc, None, &UpdateOptions::default()).unwrap();
        assert_eq!(report.velocity, Outcome::Unavailable);
        assert!(out.translation.amax() < 1e-6);
        assert!(b.t_shape().trace() < 1e-6);
        assert!(b.theta_shape().trace() < 1e-6);
        // Velocity untouched without a previous registration.
        assert_eq!(b.v_set, huge.v_set);
        assert!(b.centers_are_zero());
    }

    #[test]
    fn loose_observation_keeps_prediction() {
        let state = level_state();
        let tight = StateBounds::from_shapes(&(Matrix3::identity() * 1e-6), &(Matrix3::identity() * 1e-6), &(Matrix3::identity() * 1e-6)).unwrap();
        let unc = IcpUncertainty { shape_xi: Matrix6::identity() * 10.0 };
        let pose = Pose::new(Rotation::exp(&Vector3::new(0.0, 0.0, 0.01)), Vector3::new(0.05, 0.0, 0.0));
        let prev = PrevIcp { timestamp: -0.1, translation: Vector3::zeros(), shape_t: Matrix3::identity() * 10.0, max_accel: 0.0 };
        let state = NavState { timestamp: 0.0, ..state };
        let (out, b, report, _) = update(&state, &tight, &pose, &unc, Some(&prev), &UpdateOptions::default()).unwrap();
        assert_eq!(report.velocity, Outcome::Applied);
        assert!(out.translation.amax() < 1e-3);
        assert!((b.t_shape() - tight.t_shape()).amax() < 1e-7);
        assert!(b.centers_are_zero());
    }

    #[test]
    fn disjoint_policy() {
        let state = level_state();
        let tight = StateBounds::from_shapes(&(Matrix3::identity() * 1e-6), &(Matrix3::identity() * 1e-6), &(Matrix3::identity() * 1e-6)).unwrap();
        let unc = IcpUncertainty { shape_xi: Matrix6::identity() * 1e-8 };
        let far = Pose::new(Rotation::identity(), Vector3::new(1.0, 0.0, 0.0));
        let (out, _, report, _) = update(&state, &tight, &far, &unc, None, &UpdateOptions::default()).unwrap();
        assert_eq!(report.translation, Outcome::Disjoint);
        assert_eq!(report.rotation, Outcome::Applied);
        assert_eq!(out.translation, Vector3::zeros());
        let strict = UpdateOptions { policy: DisjointPolicy::Strict, ..Default::default() };
        assert!(matches!(
            update(&state, &tight, &far, &unc, None, &strict),
            Err(FilterError::Inconsistent { component: Component::Translation, .. })
        ));
    }

    #[test]
    fn global_level_examples() {
        let b = StateBounds::from_shapes(&Matrix3::identity(), &Matrix3::identity(), &Matrix3::identity()).unwrap();
        let pl = propagate_global(&b, &[]).unwrap();
        assert_eq!(pl.translation_set, b.t_set);
        let rec = LocalMapRecord { index: 0, origin: Vector3::zeros(), closing: b.clone() };
        let pl = propagate_global(&b, std::slice::from_ref(&rec)).unwrap();
        assert!((shape3(&pl.translation_set) - Matrix3::identity() * 4.0).amax() < 1e-12);
        let pl3 = propagate_global(&b, &[rec.clone(), rec]).unwrap();
        assert!(pl3.translation_set.trace() >= pl.translation_set.trace());
    }

    #[test]
    fn local_map_closing_threshold() {
        let b = StateBounds::from_shapes(&Matrix3::identity(), &Matrix3::identity(), &Matrix3::identity()).unwrap();
        let mut f = SetMembershipFilter::new(level_state(), b.clone(), ImuBiases::default(), ImuNoiseSpec::default(), g(), FilterParams::default());
        f.state.translation = Vector3::new(10.0, 0.0, 0.0);
        assert!(f.maybe_close_local_map().is_none());
        f.state.translation = Vector3::new(51.0, 0.0, 0.0);
        let rec = f.maybe_close_local_map().unwrap();
        assert_eq!(rec.closing, b);
        assert_eq!(f.bounds, StateBounds::floor());
        assert_eq!(f.local_origin(), Vector3::new(51.0, 0.0, 0.0));
        // Only another full radius of travel closes the next one.
        f.state.translation = Vector3::new(100.0, 0.0, 0.0);
        assert!(f.maybe_close_local_map().is_none());
        f.state.translation = Vector3::new(102.0, 0.0, 0.0);
        assert!(f.maybe_close_local_map().is_some());
        assert_eq!(f.history.len(), 2);
    }
}
