//! The odometry loop: static initialization, IMU prediction, and per-scan
//! registration, uncertainty resolution, update and map insertion.

use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, Vector3};
use thiserror::Error;

use crate::evaluation::TrajectoryRecord;
use crate::filter::{
    ball_shape, FilterError, FilterParams, ImuBiases, NavState, Outcome, SetMembershipFilter, StateBounds, UpdateReport,
};
use crate::manifold::Pose;
use crate::mapping::{voxel_downsample_indices, PointMap};
use crate::registration::{
    default_p_nl, gate_icp, icp_point_to_plane, resolve_icp_uncertainty, IcpParams, NonlinearTerm,
};
use crate::sensing::{
    point_noise_ellipsoid, static_initialize, Extrinsics, ImuNoiseSpec, ImuSample, LidarNoiseSpec, Scan, SensingError,
    StaticInit, StaticInitParams,
};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no IMU samples")]
    NoImu,
    #[error("IMU timestamps must be strictly increasing (sample {0})")]
    ImuOrder(usize),
    #[error("scan timestamps must be increasing (scan {0})")]
    ScanOrder(usize),
    #[error("static initialization failed: {0}")]
    Init(#[from] SensingError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryParams {
    pub lidar: LidarNoiseSpec,
    pub imu: ImuNoiseSpec,
    pub extrinsics: Extrinsics,
    pub icp: IcpParams,
    /// Largest accepted final ICP increment.
    pub gate_tol: f64,
    pub p_nl: Matrix6<f64>,
    pub nl_mode: NonlinearTerm,
    /// Voxel for selecting registration points from a scan.
    pub scan_voxel: f64,
    /// Voxel for map insertion.
    pub map_voxel: f64,
    /// Hash-grid cell size of the map.
    pub map_cell: f64,
    pub filter: FilterParams,
    /// Length of the motionless window used for initialization.
    pub static_window: f64,
    pub static_params: StaticInitParams,
    pub gravity: f64,
    pub initial_velocity_radius: f64,
    /// Lower bound on the initial attitude radius.
    pub initial_attitude_radius: f64,
}

impl Default for OdometryParams {
    fn default() -> Self {
        Self {
            lidar: LidarNoiseSpec::default(),
            imu: ImuNoiseSpec::default(),
            extrinsics: Extrinsics::default(),
            icp: IcpParams::default(),
            gate_tol: 1e-3,
            p_nl: default_p_nl(),
            nl_mode: NonlinearTerm::PerPoint,
            scan_voxel: 0.65,
            map_voxel: 0.5,
            map_cell: 1.0,
            filter: FilterParams::default(),
            static_window: 3.0,
            static_params: StaticInitParams::default(),
            gravity: 9.81,
            initial_velocity_radius: 0.01,
            initial_attitude_radius: 0.02,
        }
    }
}

/// Wall-clock seconds spent in each stage of one scan.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTiming {
    pub preprocess: f64,
    pub icp: f64,
    pub uncertainty: f64,
    pub update: f64,
    pub mapping: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    /// First scan: seeds the map, no registration.
    MapInit,
    Updated(UpdateReport),
    /// Registration rejected; prediction only, scan not inserted.
    Gated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub timestamp: f64,
    pub state: NavState,
    pub shape_t_local: Matrix3<f64>,
    pub shape_t_global: Matrix3<f64>,
    pub shape_v: Matrix3<f64>,
    pub shape_theta_global: Matrix3<f64>,
    pub kind: StepKind,
    pub scan_points: usize,
    pub selected_points: usize,
    pub correspondences: usize,
    pub icp_iterations: usize,
    pub timing: StepTiming,
}

impl StepRecord {
    pub fn trajectory_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            timestamp: self.timestamp,
            translation: self.state.translation,
            rotation: self.state.rotation,
            shape_t: self.shape_t_global,
            shape_t_local: Some(self.shape_t_local),
            shape_theta: Some(self.shape_theta_global),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OdometryOutput {
    pub init: StaticInit,
    pub steps: Vec<StepRecord>,
    pub map: PointMap,
    pub closed_local_maps: usize,
}

impl OdometryOutput {
    pub fn trajectory(&self) -> Vec<TrajectoryRecord> {
        self.steps.iter().map(StepRecord::trajectory_record).collect()
    }

    pub fn gated_count(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == StepKind::Gated).count()
    }

    /// Number of (translation, velocity, rotation) updates that met a
    /// disjoint observation.
    pub fn disjoint_count(&self) -> usize {
        self.steps
            .iter()
            .filter_map(|s| match s.kind {
                StepKind::Updated(r) => Some(
                    [r.translation, r.velocity, r.rotation].iter().filter(|o| **o == Outcome::Disjoint).count(),
                ),
                _ => None,
            })
            .sum()
    }
}

/// Initial bounds: translation at the floor, a small velocity ball, and an
/// attitude ball covering the tilt an unknown accelerometer bias can cause.
pub fn initial_bounds(params: &OdometryParams) -> Result<StateBounds> {
    let bias_radius = params.imu.p_ba.trace().max(0.0).sqrt();
    let tilt = (bias_radius / params.gravity).asin().max(params.initial_attitude_radius);
    Ok(StateBounds::from_shapes(&Matrix3::zeros(), &ball_shape(params.initial_velocity_radius), &ball_shape(tilt))?)
}

struct Runner<'a> {
    params: &'a OdometryParams,
    filter: SetMembershipFilter,
    map: PointMap,
    steps: Vec<StepRecord>,
    closed: usize,
}

impl Runner<'_> {
    fn process_scan(&mut self, scan: &Scan) -> Result<()> {
        let p = self.params;
        let start = Instant::now();
        let measured: Vec<(Vector3<f64>, Matrix3<f64>)> =
            scan.points.iter().map(|m| point_noise_ellipsoid(m, &p.lidar, &p.extrinsics)).collect();
        let positions: Vec<Vector3<f64>> = measured.iter().map(|m| m.0).collect();
        let selected: Vec<(Vector3<f64>, Matrix3<f64>)> =
            voxel_downsample_indices(&positions, p.scan_voxel).into_iter().map(|i| measured[i]).collect();
        let mut timing = StepTiming { preprocess: start.elapsed().as_secs_f64(), ..Default::default() };

        let predicted = self.filter.state.pose();
        let mut correspondences = 0;
        let mut icp_iterations = 0;
        let kind = if self.map.is_empty() {
            StepKind::MapInit
        } else {
            let t = Instant::now();
            let icp = icp_point_to_plane(&selected, &self.map, &predicted, &p.icp);
            timing.icp = t.elapsed().as_secs_f64();
            match icp {
                Ok(res) if gate_icp(&res, p.gate_tol) => {
                    correspondences = res.correspondences.len();
                    icp_iterations = res.iterations;
                    let t = Instant::now();
                    let unc = resolve_icp_uncertainty(&res, &p.p_nl, p.nl_mode);
                    timing.uncertainty = t.elapsed().as_secs_f64();
                    match unc {
                        Ok(unc) => {
                            let t = Instant::now();
                            let report = self.filter.update(&res.pose, &unc)?;
                            timing.update = t.elapsed().as_secs_f64();
                            StepKind::Updated(report)
                        }
                        Err(e) => {
                            log::warn!("t = {:.3}: uncertainty unavailable ({e}); prediction only", scan.timestamp);
                            StepKind::Gated
                        }
                    }
                }
                Ok(res) => {
                    log::warn!(
                        "t = {:.3}: registration gated (converged {}, last step {:.3e})",
                        scan.timestamp,
                        res.converged,
                        res.last_increment.norm()
                    );
                    icp_iterations = res.iterations;
                    StepKind::Gated
                }
                Err(e) => {
                    log::warn!("t = {:.3}: registration failed ({e}); prediction only", scan.timestamp);
                    StepKind::Gated
                }
            }
        };

        let t = Instant::now();
        if kind == StepKind::Gated {
            self.filter.skip_update();
        } else {
            if let Some(rec) = self.filter.maybe_close_local_map() {
                log::info!("closed local map {} at t = {:.3}", rec.index, scan.timestamp);
                self.map.start_new_local_map(self.filter.local_origin());
                self.closed += 1;
            }
            let pose = self.filter.state.pose();
            let world: Vec<Vector3<f64>> = positions.iter().map(|q| pose.transform_point(q)).collect();
            self.map.insert_scan(&world, p.map_voxel);
        }
        timing.mapping = t.elapsed().as_secs_f64();
        timing.total = start.elapsed().as_secs_f64();

        let pl = self.filter.protection_level()?;
        self.steps.push(StepRecord {
            timestamp: scan.timestamp,
            state: self.filter.state,
            shape_t_local: self.filter.bounds.t_shape(),
            shape_t_global: mat3(pl.translation_set.shape()),
            shape_v: self.filter.bounds.v_shape(),
            shape_theta_global: mat3(pl.rotation_set.shape()),
            kind,
            scan_points: scan.points.len(),
            selected_points: selected.len(),
            correspondences,
            icp_iterations,
            timing,
        });
        Ok(())
    }
}

fn mat3(m: &nalgebra::DMatrix<f64>) -> Matrix3<f64> {
    Matrix3::from_column_slice(m.as_slice())
}

/// Runs the full odometry over time-sorted IMU samples and scans.
///
/// The first `static_window` seconds of IMU data must be motionless. The
/// filter starts at the first IMU timestamp; scans outside the IMU time span
/// are ignored. A scan is processed at the state of the last IMU sample not
/// after it, without interpolation.
pub fn run_odometry(imu: &[ImuSample], scans: &[Scan], params: &OdometryParams) -> Result<OdometryOutput> {
    if imu.is_empty() {
        return Err(PipelineError::NoImu);
    }
    if let Some(i) = imu.windows(2).position(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(PipelineError::ImuOrder(i + 1));
    }
    if let Some(i) = scans.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(PipelineError::ScanOrder(i + 1));
    }
    let t0 = imu[0].timestamp;
    let window: Vec<ImuSample> =
        imu.iter().take_while(|s| s.timestamp < t0 + params.static_window - TIME_EPS).copied().collect();
    let init = static_initialize(&window, params.gravity, &params.static_params)?;
    log::info!(
        "static init: {} samples, accel bias {:?}, gyro bias {:?}",
        window.len(),
        init.accel_bias.as_slice(),
        init.gyro_bias.as_slice()
    );

    let state = NavState { timestamp: t0, translation: Vector3::zeros(), velocity: Vector3::zeros(), rotation: init.initial_rotation };
    let filter = SetMembershipFilter::new(
        state,
        initial_bounds(params)?,
        ImuBiases { accel: init.accel_bias, gyro: init.gyro_bias },
        params.imu,
        init.gravity_w,
        params.filter,
    );
    let mut run = Runner { params, filter, map: PointMap::new(params.map_cell), steps: Vec::with_capacity(scans.len()), closed: 0 };

    let mut k = 0;
    let t_end = imu[imu.len() - 1].timestamp;
    for scan in scans.iter().filter(|s| s.timestamp >= t0 - TIME_EPS && s.timestamp <= t_end + TIME_EPS) {
        while k + 1 < imu.len() && imu[k + 1].timestamp <= scan.timestamp + TIME_EPS {
            let dt = imu[k + 1].timestamp - run.filter.state.timestamp;
            if dt > TIME_EPS {
                run.filter.predict(&imu[k], dt)?;
            }
            run.filter.state.timestamp = imu[k + 1].timestamp;
            k += 1;
        }
        run.process_scan(scan)?;
    }
    Ok(OdometryOutput { init, steps: run.steps, map: run.map, closed_local_maps: run.closed })
}

/// Rotation and translation of a step as a pose.
pub fn step_pose(step: &StepRecord) -> Pose {
    Pose { rotation: step.state.rotation, translation: step.state.translation }
}
