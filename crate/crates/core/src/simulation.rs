//! Synthetic world, trajectories and sensor streams with exact ground truth.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::manifold::{so3_exp, tangent_basis_unchecked, Pose, Rotation};
use crate::sensing::{ImuSample, PointMeasurement, Scan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("invalid world: {0}")]
    World(String),
    #[error("invalid sensor setup: {0}")]
    Sensor(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Bounded planar rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub normal: Vector3<f64>,
    pub anchor: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Patch {
    /// Rectangle centered at `anchor` spanned by two orthogonal directions.
    pub fn new(anchor: Vector3<f64>, axis_u: Vector3<f64>, axis_v: Vector3<f64>, half_u: f64, half_v: f64) -> Result<Self> {
        let u = axis_u.normalize();
        let v = axis_v.normalize();
        if u.dot(&v).abs() > 1e-9 || !(half_u > 0.0 && half_v > 0.0) {
            return Err(SimError::World("patch axes must be orthogonal and extents positive".into()));
        }
        Ok(Self { normal: u.cross(&v), anchor, axis_u: u, axis_v: v, half_u, half_v })
    }

    /// Distance along the unit ray to the patch, if it is hit in front.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = self.normal.dot(&(self.anchor - origin)) / denom;
        if !(s > 0.0) {
            return None;
        }
        let local = origin + dir * s - self.anchor;
        (local.dot(&self.axis_u).abs() <= self.half_u && local.dot(&self.axis_v).abs() <= self.half_v).then_some(s)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.anchor))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub patches: Vec<Patch>,
}

impl World {
    /// 20 × 20 × 5 m room around the start pose (floor 1.5 m below it) with
    /// four interior panels at assorted headings.
    pub fn default_room() -> Self {
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        let (lo, hi) = (-1.5, 3.5);
        let zc = 0.5 * (lo + hi);
        let mut patches = vec![
            Patch::new(Vector3::new(0.0, 0.0, lo), x, y, 10.0, 10.0),
            Patch::new(Vector3::new(0.0, 0.0, hi), y, x, 10.0, 10.0),
            Patch::new(Vector3::new(10.0, 0.0, zc), z, y, 2.5, 10.0),
            Patch::new(Vector3::new(-10.0, 0.0, zc), y, z, 10.0, 2.5),
            Patch::new(Vector3::new(0.0, 10.0, zc), x, z, 10.0, 2.5),
            Patch::new(Vector3::new(0.0, -10.0, zc), z, x, 2.5, 10.0),
        ];
        for (cx, cy, heading, half_w) in [(6.0, 5.0, 0.5, 1.5), (-6.5, 4.0, -0.9, 1.2), (4.5, -6.5, 1.3, 1.4), (-5.5, -5.5, 2.4, 1.0)] {
            let u = Vector3::new(f64::cos(heading), f64::sin(heading), 0.0);
            patches.push(Patch::new(Vector3::new(cx, cy, 0.0), u, z, half_w, 1.25));
        }
        Self { patches: patches.into_iter().map(|p| p.expect("static room geometry")).collect() }
    }

    /// Closest hit along the unit ray: `(range, patch index)`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        self.patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|s| (s, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }
}

/// Ground truth at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// World-frame acceleration.
    pub accel_w: Vector3<f64>,
    pub rotation: Rotation,
    /// Body-frame angular velocity.
    pub omega_b: Vector3<f64>,
}

impl TruthSample {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub t: f64,
    pub position: Vector3<f64>,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryKind {
    Stationary,
    /// Constant velocity from the origin, level, heading along +x.
    Line { velocity: Vector3<f64> },
    /// Level circle through the origin with the heading along the tangent.
    Circle { radius: f64, period: f64 },
    /// Natural cubic spline through the waypoints (position and yaw).
    Waypoints(Vec<Waypoint>),
    /// Still for `still` seconds, then a smoothly ramped Lissajous tour of
    /// the room with gentle roll, pitch and yaw.
    RoomTour { still: f64, ramp: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub imu_rate: f64,
    pub lidar_rate: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self { kind: TrajectoryKind::RoomTour { still: 3.0, ramp: 2.0 }, duration: 60.0, imu_rate: 200.0, lidar_rate: 10.0 }
    }
}

/// Natural cubic spline in one variable.
#[derive(Debug, Clone, PartialEq)]
struct Spline {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    fn new(t: Vec<f64>, y: Vec<f64>) -> Self {
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm for the interior second derivatives.
            let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            for i in 1..n - 1 {
                let a = h[i - 1];
                let b = 2.0 * (h[i - 1] + h[i]);
                let cc = h[i];
                let rhs = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
                let denom = b - a * c[i - 1];
                c[i] = cc / denom;
                d[i] = (rhs - a * d[i - 1]) / denom;
            }
            for i in (1..n - 1).rev() {
                m[i] = d[i] - c[i] * m[i + 1];
            }
        }
        Self { t, y, m }
    }

    /// Value and first two derivatives; clamps to the end segments.
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let n = self.t.len();
        let i = match self.t.partition_point(|&ti| ti <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = ((t1 - x) / h, (x - t0) / h);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let val = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d1 = (y1 - y0) / h + (-(3.0 * a * a - 1.0) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        let d2 = a * m0 + b * m1;
        (val, d1, d2)
    }
}

/// Analytic pose curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    kind: TrajectoryKind,
    splines: Option<[Spline; 4]>,
}

/// Quintic smoothstep and its first two derivatives on `[0, 1]`.
fn smoothstep(x: f64) -> (f64, f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if x >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let x2 = x * x;
    let x3 = x2 * x;
    (
        x3 * (10.0 - 15.0 * x + 6.0 * x2),
        30.0 * x2 * (1.0 - x).powi(2),
        60.0 * x * (1.0 - x) * (1.0 - 2.0 * x),
    )
}

/// `A sin(w τ)` with derivatives.
fn sine(amp: f64, w: f64, tau: f64) -> (f64, f64, f64) {
    let (s, c) = (w * tau).sin_cos();
    (amp * s, amp * w * c, -amp * w * w * s)
}

fn ramped(s: (f64, f64, f64), f: (f64, f64, f64)) -> (f64, f64, f64) {
    (s.0 * f.0, s.1 * f.0 + s.0 * f.1, s.2 * f.0 + 2.0 * s.1 * f.1 + s.0 * f.2)
}

/// Body angular velocity of `Rz(yaw) Ry(pitch) Rx(roll)`.
fn zyx_body_rate(yaw: (f64, f64), pitch: (f64, f64), roll: (f64, f64)) -> Vector3<f64> {
    let (_, dy) = yaw;
    let (p, dp) = pitch;
    let (r, dr) = roll;
    let (sp, cp) = p.sin_cos();
    let (sr, cr) = r.sin_cos();
    Vector3::new(dr - sp * dy, cr * dp + sr * cp * dy, -sr * dp + cr * cp * dy)
}

impl Trajectory {
    pub fn new(kind: TrajectoryKind) -> Result<Self> {
        let splines = match &kind {
            TrajectoryKind::Waypoints(wps) => {
                if wps.len() < 2 {
                    return Err(SimError::Trajectory("need at least two waypoints".into()));
                }
                if wps.iter().any(|w| !(w.t.is_finite() && w.yaw.is_finite() && w.position.iter().all(|v| v.is_finite()))) {
                    return Err(SimError::Trajectory("waypoints must be finite".into()));
                }
                if wps.windows(2).any(|w| !(w[1].t > w[0].t)) {
                    return Err(SimError::Trajectory("waypoint times must be strictly increasing".into()));
                }
                let t: Vec<f64> = wps.iter().map(|w| w.t).collect();
                let comp = |f: &dyn Fn(&Waypoint) -> f64| Spline::new(t.clone(), wps.iter().map(f).collect());
                Some([
                    comp(&|w| w.position.x),
                    comp(&|w| w.position.y),
                    comp(&|w| w.position.z),
                    comp(&|w| w.yaw),
                ])
            }
            TrajectoryKind::Circle { radius, period } if !(*radius > 0.0 && *period > 0.0) => {
                return Err(SimError::Trajectory("circle radius and period must be positive".into()));
            }
            TrajectoryKind::RoomTour { still, ramp } if !(*still >= 0.0 && *ramp > 0.0) => {
                return Err(SimError::Trajectory("tour still time must be >= 0 and ramp > 0".into()));
            }
            _ => None,
        };
        Ok(Self { kind, splines })
    }

    pub fn at(&self, t: f64) -> TruthSample {
        let level = |position, velocity, accel_w, yaw: f64, yaw_rate: f64| TruthSample {
            timestamp: t,
            position,
            velocity,
            accel_w,
            rotation: Rotation::exp(&Vector3::new(0.0, 0.0, yaw)),
            omega_b: Vector3::new(0.0, 0.0, yaw_rate),
        };
        match &self.kind {
            TrajectoryKind::Stationary => level(Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), 0.0, 0.0),
            TrajectoryKind::Line { velocity } => level(velocity * t, *velocity, Vector3::zeros(), 0.0, 0.0),
            TrajectoryKind::Circle { radius, period } => {
                let w = std::f64::consts::TAU / period;
                let (s, c) = (w * t).sin_cos();
                let r = *radius;
                level(
                    Vector3::new(r * s, r * (1.0 - c), 0.0),
                    Vector3::new(r * w * c, r * w * s, 0.0),
                    Vector3::new(-r * w * w * s, r * w * w * c, 0.0),
                    w * t,
                    w,
                )
            }
            TrajectoryKind::Waypoints(_) => {
                let [sx, sy, sz, syaw] = self.splines.as_ref().expect("waypoint splines");
                let (x, y, z, yaw) = (sx.eval(t), sy.eval(t), sz.eval(t), syaw.eval(t));
                level(
                    Vector3::new(x.0, y.0, z.0),
                    Vector3::new(x.1, y.1, z.1),
                    Vector3::new(x.2, y.2, z.2),
                    yaw.0,
                    yaw.1,
                )
            }
            TrajectoryKind::RoomTour { still, ramp } => {
                let tau = (t - still).max(0.0);
                let s = smoothstep(tau / ramp);
                let s = (s.0, s.1 / ramp, s.2 / (ramp * ramp));
                let w = |period: f64| std::f64::consts::TAU / period;
                let px = ramped(s, sine(3.0, w(20.0), tau));
                let py = ramped(s, sine(2.5, w(13.0), tau));
                let pz = ramped(s, sine(0.4, w(9.0), tau));
                let yaw = ramped(s, sine(1.2, w(25.0), tau));
                let pitch = ramped(s, sine(0.08, w(7.0), tau));
                let roll = ramped(s, sine(0.1, w(5.5), tau));
                TruthSample {
                    timestamp: t,
                    position: Vector3::new(px.0, py.0, pz.0),
                    velocity: Vector3::new(px.1, py.1, pz.1),
                    accel_w: Vector3::new(px.2, py.2, pz.2),
                    rotation: Rotation::from_euler_zyx(yaw.0, pitch.0, roll.0),
                    omega_b: zyx_body_rate((yaw.0, yaw.1), (pitch.0, pitch.1), (roll.0, roll.1)),
                }
            }
        }
    }
}

fn sample_count(duration: f64, rate: f64) -> usize {
    (duration * rate).round() as usize
}

/// Ground truth at IMU rate: `round(duration · imu_rate)` samples from `t = 0`.
pub fn simulate_trajectory(spec: &TrajectorySpec) -> Result<Vec<TruthSample>> {
    validate_spec(spec)?;
    let traj = Trajectory::new(spec.kind.clone())?;
    Ok((0..sample_count(spec.duration, spec.imu_rate)).map(|i| traj.at(i as f64 / spec.imu_rate)).collect())
}

/// Scan instants: `round(duration · lidar_rate)` of them, from `t = 0`.
pub fn scan_times(spec: &TrajectorySpec) -> Vec<f64> {
    (0..sample_count(spec.duration, spec.lidar_rate)).map(|j| j as f64 / spec.lidar_rate).collect()
}

fn validate_spec(spec: &TrajectorySpec) -> Result<()> {
    if !(spec.duration > 0.0 && spec.duration.is_finite()) {
        return Err(SimError::Trajectory(format!("duration must be positive, got {}", spec.duration)));
    }
    if !(spec.imu_rate > 0.0 && spec.lidar_rate > 0.0) {
        return Err(SimError::Trajectory("sensor rates must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Uniform inside the bound.
    #[default]
    Uniform,
    /// On the boundary of the bound.
    Adversarial,
}

/// Noise actually injected by the simulator. Zero bounds are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimNoise {
    pub b_r: f64,
    pub b_phi: f64,
    pub b_a: f64,
    pub b_g: f64,
    pub mode: NoiseMode,
}

impl SimNoise {
    pub fn zero() -> Self {
        Self { b_r: 0.0, b_phi: 0.0, b_a: 0.0, b_g: 0.0, mode: NoiseMode::Uniform }
    }
}

fn draw_scalar(rng: &mut impl Rng, bound: f64, mode: NoiseMode) -> f64 {
    if bound <= 0.0 {
        return 0.0;
    }
    match mode {
        NoiseMode::Uniform => rng.random_range(-bound..=bound),
        NoiseMode::Adversarial => {
            if rng.random::<bool>() { bound } else { -bound }
        }
    }
}

fn draw_disk(rng: &mut impl Rng, bound: f64, mode: NoiseMode) -> Vector2<f64> {
    if bound <= 0.0 {
        return Vector2::zeros();
    }
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let r = match mode {
        NoiseMode::Uniform => bound * rng.random::<f64>().sqrt(),
        NoiseMode::Adversarial => bound,
    };
    Vector2::new(r * angle.cos(), r * angle.sin())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimImu {
    pub samples: Vec<ImuSample>,
    pub accel_noise: Vec<Vector3<f64>>,
    pub gyro_noise: Vec<Vector3<f64>>,
}

/// IMU stream: `accel = Rᵀ(a_W - g) + b_a + n_a`, `gyro = ω_b + b_g + n_g`.
pub fn synthesize_imu(
    truth: &[TruthSample],
    accel_bias: &Vector3<f64>,
    gyro_bias: &Vector3<f64>,
    gravity_w: &Vector3<f64>,
    noise: &SimNoise,
    seed: u64,
) -> SimImu {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut out = SimImu { samples: Vec::with_capacity(truth.len()), accel_noise: Vec::new(), gyro_noise: Vec::new() };
    for s in truth {
        let na = Vector3::from_fn(|_, _| draw_scalar(&mut rng, noise.b_a, noise.mode));
        let ng = Vector3::from_fn(|_, _| draw_scalar(&mut rng, noise.b_g, noise.mode));
        let rt = s.rotation.matrix().transpose();
        out.samples.push(ImuSample {
            timestamp: s.timestamp,
            accel: rt * (s.accel_w - gravity_w) + accel_bias + na,
            gyro: s.omega_b + gyro_bias + ng,
        });
        out.accel_noise.push(na);
        out.gyro_noise.push(ng);
    }
    out
}

/// Elevation × azimuth beam grid in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamPattern {
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for BeamPattern {
    fn default() -> Self {
        Self { rings: 16, elevation_min_deg: -15.0, elevation_max_deg: 15.0, azimuth_steps: 720, min_range: 0.3, max_range: 100.0 }
    }
}

impl BeamPattern {
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let mut dirs = Vec::with_capacity(self.rings * self.azimuth_steps);
        for i in 0..self.rings {
            let el = if self.rings == 1 {
                0.5 * (self.elevation_min_deg + self.elevation_max_deg)
            } else {
                self.elevation_min_deg + (self.elevation_max_deg - self.elevation_min_deg) * i as f64 / (self.rings - 1) as f64
            }
            .to_radians();
            for j in 0..self.azimuth_steps {
                let az = std::f64::consts::TAU * j as f64 / self.azimuth_steps as f64;
                dirs.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        dirs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScan {
    pub scan: Scan,
    /// Noise-free sensor-frame points, parallel to `scan.points`.
    pub true_points: Vec<Vector3<f64>>,
    pub range_noise: Vec<f64>,
    pub bearing_noise: Vec<Vector2<f64>>,
    pub patch_ids: Vec<usize>,
}

/// One scan from `sensor_pose` (LiDAR-to-world). Beams that miss every patch
/// or fall outside the range limits are dropped.
pub fn synthesize_scan(
    timestamp: f64,
    sensor_pose: &Pose,
    world: &World,
    pattern: &BeamPattern,
    noise: &SimNoise,
    rng: &mut impl RngCore,
) -> SimScan {
    let mut out = SimScan {
        scan: Scan { timestamp, points: Vec::new() },
        true_points: Vec::new(),
        range_noise: Vec::new(),
        bearing_noise: Vec::new(),
        patch_ids: Vec::new(),
    };
    let r = sensor_pose.rotation.matrix();
    for dir in pattern.directions() {
        let Some((d, patch)) = world.raycast(&sensor_pose.translation, &(r * dir)) else {
            continue;
        };
        // Draw even for dropped returns so noise streams do not depend on range gates.
        let nd = draw_scalar(rng, noise.b_r, noise.mode);
        let nphi = draw_disk(rng, noise.b_phi, noise.mode);
        if d < pattern.min_range || d > pattern.max_range {
            continue;
        }
        let range = d - nd;
        if !(range > 0.0) {
            continue;
        }
        let n = tangent_basis_unchecked(&dir);
        let bearing = (so3_exp(&(n * (-nphi))) * dir).normalize();
        out.scan.points.push(PointMeasurement { timestamp, range, bearing });
        out.true_points.push(dir * d);
        out.range_noise.push(nd);
        out.bearing_noise.push(nphi);
        out.patch_ids.push(patch);
    }
    out
}

/// Everything the simulator produces for one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub truth: Vec<TruthSample>,
    pub imu: SimImu,
    pub scans: Vec<SimScan>,
    pub scan_truth: Vec<TruthSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub trajectory: TrajectorySpec,
    pub world: World,
    pub beams: BeamPattern,
    pub noise: SimNoise,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub gravity: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            world: World::default_room(),
            beams: BeamPattern::default(),
            noise: SimNoise { b_r: 0.08, b_phi: 0.1f64.to_radians(), b_a: 0.2, b_g: 0.07, mode: NoiseMode::Uniform },
            accel_bias: Vector3::new(0.01, -0.005, 0.005),
            gyro_bias: Vector3::new(0.002, -0.001, 0.0015),
            gravity: 9.81,
            seed: 0,
        }
    }
}

/// Runs the whole simulator. Scans use independent random streams, so they
/// are generated in parallel with bitwise-reproducible results.
pub fn simulate_episode(cfg: &SimConfig) -> Result<Episode> {
    for (name, v) in [("b_r", cfg.noise.b_r), ("b_phi", cfg.noise.b_phi), ("b_a", cfg.noise.b_a), ("b_g", cfg.noise.b_g)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(SimError::Sensor(format!("noise bound {name} must be >= 0, got {v}")));
        }
    }
    if cfg.beams.rings == 0 || cfg.beams.azimuth_steps == 0 {
        return Err(SimError::Sensor("beam pattern is empty".into()));
    }
    let truth = simulate_trajectory(&cfg.trajectory)?;
    let traj = Trajectory::new(cfg.trajectory.kind.clone())?;
    let gravity_w = Vector3::new(0.0, 0.0, -cfg.gravity);
    let imu = synthesize_imu(&truth, &cfg.accel_bias, &cfg.gyro_bias, &gravity_w, &cfg.noise, cfg.seed);
    let scan_truth: Vec<TruthSample> = scan_times(&cfg.trajectory).into_iter().map(|t| traj.at(t)).collect();
    let scans = scan_truth
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + j as u64);
            synthesize_scan(s.timestamp, &s.pose(), &cfg.world, &cfg.beams, &cfg.noise, &mut rng)
        })
        .collect();
    Ok(Episode { truth, imu, scans, scan_truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::so3_log;

    #[test]
    fn stationary_is_constant() {
        let spec = TrajectorySpec { kind: TrajectoryKind::Stationary, duration: 1.0, ..Default::default() };
        let truth = simulate_trajectory(&spec).unwrap();
        assert_eq!(truth.len(), 200);
        assert!(truth.iter().all(|s| s.position == Vector3::zeros() && s.omega_b == Vector3::zeros()));
    }

    #[test]
    fn line_has_constant_velocity() {
        let v = Vector3::new(1.0, 0.5, 0.0);
        let spec = TrajectorySpec { kind: TrajectoryKind::Line { velocity: v }, duration: 2.0, ..Default::default() };
        let truth = simulate_trajectory(&spec).unwrap();
        assert!(truth.iter().all(|s| s.velocity == v && s.accel_w == Vector3::zeros()));
        let imu = synthesize_imu(&truth, &Vector3::zeros(), &Vector3::zeros(), &Vector3::new(0.0, 0.0, -9.81), &SimNoise::zero(), 1);
        assert!(imu.samples.iter().all(|s| s.accel == Vector3::new(0.0, 0.0, 9.81) && s.gyro == Vector3::zeros()));
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let traj = Trajectory::new(TrajectoryKind::Circle { radius: 5.0, period: 20.0 }).unwrap();
        let expected = (std::f64::consts::TAU / 20.0).powi(2) * 5.0;
        assert!((expected - 0.4935).abs() < 1e-4);
        for t in [0.0, 3.3, 17.0] {
            assert!((traj.at(t).accel_w.norm() - expected).abs() < 1e-12);
        }
    }

    fn check_derivatives(traj: &Trajectory, times: &[f64]) {
        let h = 1e-5;
        for &t in times {
            let (a, b, c) = (traj.at(t - h), traj.at(t), traj.at(t + h));
            let v = (c.position - a.position) / (2.0 * h);
            let acc = (c.position - 2.0 * b.position + a.position) / (h * h);
            assert!((v - b.velocity).amax() < 1e-8, "velocity at {t}");
            assert!((acc - b.accel_w).amax() < 1e-4, "acceleration at {t}");
            let w = (so3_log(&(a.rotation.matrix().transpose() * c.rotation.matrix())).unwrap()) / (2.0 * h);
            assert!((w - b.omega_b).amax() < 1e-8, "angular rate at {t}");
        }
    }

    #[test]
    fn tour_derivatives_are_consistent() {
        let traj = Trajectory::new(TrajectoryKind::RoomTour { still: 3.0, ramp: 2.0 }).unwrap();
        check_derivatives(&traj, &[1.0, 3.7, 4.2, 10.0, 33.3, 59.0]);
        let start = traj.at(0.0);
        assert_eq!(start.position, Vector3::zeros());
        assert_eq!(start.rotation, Rotation::identity());
    }

    #[test]
    fn waypoint_spline() {
        let wps = vec![
            Waypoint { t: 0.0, position: Vector3::zeros(), yaw: 0.0 },
            Waypoint { t: 2.0, position: Vector3::new(1.0, 1.0, 0.0), yaw: 0.5 },
            Waypoint { t: 5.0, position: Vector3::new(2.0, -1.0, 0.5), yaw: -0.2 },
            Waypoint { t: 7.0, position: Vector3::new(0.0, 0.0, 0.0), yaw: 0.0 },
        ];
        let traj = Trajectory::new(TrajectoryKind::Waypoints(wps.clone())).unwrap();
        for w in &wps {
            assert!((traj.at(w.t).position - w.position).amax() < 1e-12);
        }
        check_derivatives(&traj, &[0.7, 2.5, 4.9, 6.1]);
        let bad = vec![wps[1], wps[0]];
        assert!(Trajectory::new(TrajectoryKind::Waypoints(bad)).is_err());
        assert!(Trajectory::new(TrajectoryKind::Waypoints(vec![wps[0]])).is_err());
    }

    #[test]
    fn imu_bias_and_noise_bounds() {
        let spec = TrajectorySpec { kind: TrajectoryKind::Stationary, duration: 1.0, ..Default::default() };
        let truth = simulate_trajectory(&spec).unwrap();
        let g = Vector3::new(0.0, 0.0, -9.81);
        let still = synthesize_imu(&truth, &Vector3::zeros(), &Vector3::new(0.01, 0.0, 0.0), &g, &SimNoise::zero(), 3);
        assert!(still.samples.iter().all(|s| s.gyro == Vector3::new(0.01, 0.0, 0.0)));
        for mode in [NoiseMode::Uniform, NoiseMode::Adversarial] {
            let noise = SimNoise { b_a: 0.2, b_g: 0.07, mode, ..SimNoise::zero() };
            let imu = synthesize_imu(&truth, &Vector3::zeros(), &Vector3::zeros(), &g, &noise, 3);
            assert!(imu.accel_noise.iter().all(|n| n.amax() <= 0.2));
            assert!(imu.gyro_noise.iter().all(|n| n.amax() <= 0.07));
            for (s, n) in imu.samples.iter().zip(&imu.accel_noise) {
                assert!((s.accel - Vector3::new(0.0, 0.0, 9.81) - n).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn straight_down_beam() {
        let world = World { patches: vec![Patch::new(Vector3::zeros(), Vector3::x(), Vector3::y(), 50.0, 50.0).unwrap()] };
        let pattern = BeamPattern { rings: 1, elevation_min_deg: -90.0, elevation_max_deg: -90.0, azimuth_steps: 1, ..Default::default() };
        let pose = Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scan = synthesize_scan(0.0, &pose, &world, &pattern, &SimNoise::zero(), &mut rng);
        assert_eq!(scan.scan.points.len(), 1);
        let p = scan.scan.points[0];
        assert!((p.range - 2.0).abs() < 1e-12);
        assert!((p.bearing - Vector3::new(0.0, 0.0, -1.0)).amax() < 1e-12);
    }

    #[test]
    fn parallel_beam_is_dropped() {
        let world = World { patches: vec![Patch::new(Vector3::zeros(), Vector3::x(), Vector3::y(), 50.0, 50.0).unwrap()] };
        let pattern = BeamPattern { rings: 1, elevation_min_deg: 0.0, elevation_max_deg: 0.0, azimuth_steps: 8, ..Default::default() };
        let pose = Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize_scan(0.0, &pose, &world, &pattern, &SimNoise::zero(), &mut rng).scan.points.is_empty());
    }

    #[test]
    fn scan_noise_is_bounded_and_rays_are_exact() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec { duration: 5.0, ..Default::default() },
            noise: SimNoise { b_r: 0.1, b_phi: 0.01, b_a: 0.0, b_g: 0.0, mode: NoiseMode::Adversarial },
            ..Default::default()
        };
        let ep = simulate_episode(&cfg).unwrap();
        for (scan, truth) in ep.scans.iter().zip(&ep.scan_truth).step_by(10) {
            for i in 0..scan.scan.points.len() {
                assert!(scan.range_noise[i].abs() <= 0.1);
                assert!(scan.bearing_noise[i].norm() <= 0.01 + 1e-15);
                let world_pt = truth.pose().transform_point(&scan.true_points[i]);
                assert!(cfg.world.patches[scan.patch_ids[i]].signed_distance(&world_pt).abs() < 1e-9);
                let m = scan.scan.points[i];
                assert!((m.range + scan.range_noise[i] - scan.true_points[i].norm()).abs() < 1e-12);
                // The bearing error is a rotation by exactly the drawn noise.
                let angle = m.bearing.dot(&scan.true_points[i].normalize()).clamp(-1.0, 1.0).acos();
                assert!((angle - scan.bearing_noise[i].norm()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let cfg = SimConfig { trajectory: TrajectorySpec { duration: 2.0, ..Default::default() }, seed: 42, ..Default::default() };
        let a = simulate_episode(&cfg).unwrap();
        let b = simulate_episode(&cfg).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.scans, b.scans);
        let c = simulate_episode(&SimConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.imu, c.imu);
    }

    #[test]
    fn default_room_gives_enough_points() {
        let cfg = SimConfig { trajectory: TrajectorySpec { duration: 0.1, ..Default::default() }, ..Default::default() };
        let ep = simulate_episode(&cfg).unwrap();
        assert!(ep.scans[0].scan.points.len() > 5000);
    }
}
