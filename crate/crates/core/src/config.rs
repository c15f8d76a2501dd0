//! Run configuration: a TOML file with one section per subsystem. Every key
//! is optional; missing keys take the defaults in [`DEFAULT_CONFIG`].

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector3};
use serde::Deserialize;
use toml::Spanned;

use crate::filter::{DisjointPolicy, FilterParams, UpdateOptions};
use crate::mapping::PlaneParams;
use crate::pipeline::OdometryParams;
use crate::registration::{IcpParams, NonlinearTerm};
use crate::sensing::{box_shape3, ImuNoiseSpec, LidarNoiseSpec, StaticInitParams};
use crate::simulation::{BeamPattern, NoiseMode, SimConfig, SimNoise, TrajectoryKind, TrajectorySpec, World};

pub const DEFAULT_CONFIG: &str = r#"[lidar]
b_r = 0.08          # range bound, m
b_phi_deg = 0.1     # bearing bound, degrees

[imu]
b_a = 0.2           # accelerometer noise bound, m/s^2
b_g = 0.07          # gyroscope noise bound, rad/s
# bias_a = 0.02     # residual accelerometer bias bound per axis, default b_a / 10
# bias_g = 0.007    # residual gyroscope bias bound per axis, default b_g / 10

[icp]
max_iterations = 30
converge_tol = 1e-6
freeze_tol = 1e-3
gate_tol = 1e-3
min_correspondences = 10
cond_max = 1e8
max_halvings = 4
p_nl = 3e-8         # diagonal of the linearization compensation shape
nonlinear_term = "per_point"

[map]
scan_voxel = 0.65
voxel = 0.5
cell = 1.0
k = 5
max_corr_dist = 1.0
plane_tol = 0.05
max_plane_dist = 0.2
local_map_radius = 50.0

[filter]
dt_max = 0.02
disjoint_policy = "skip"
static_window = 3.0
static_min_samples = 200
stillness_threshold = 0.1
gravity = 9.81
initial_velocity_radius = 0.01
initial_attitude_radius = 0.02

[sim]
trajectory = "room_tour"
still = 3.0
ramp = 2.0
duration = 60.0
imu_rate = 200.0
lidar_rate = 10.0
noise_mode = "uniform"
b_r = 0.08
b_phi_deg = 0.1
b_a = 0.2
b_g = 0.07
accel_bias = [0.01, -0.005, 0.005]
gyro_bias = [0.002, -0.001, 0.0015]
seed = 0

[output]
dir = "out"
"#;

/// A rejected configuration, with the 1-based line of the offending value
/// when known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub odometry: OdometryParams,
    pub sim: SimConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse(DEFAULT_CONFIG).expect("default config is valid")
    }
}

type S<T> = Option<Spanned<T>>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Raw {
    lidar: RawLidar,
    imu: RawImu,
    icp: RawIcp,
    map: RawMap,
    filter: RawFilter,
    sim: RawSim,
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawLidar {
    b_r: S<f64>,
    b_phi_deg: S<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawImu {
    b_a: S<f64>,
    b_g: S<f64>,
    bias_a: S<f64>,
    bias_g: S<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawIcp {
    max_iterations: S<i64>,
    converge_tol: S<f64>,
    freeze_tol: S<f64>,
    gate_tol: S<f64>,
    min_correspondences: S<i64>,
    cond_max: S<f64>,
    max_halvings: S<i64>,
    p_nl: S<f64>,
    nonlinear_term: S<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawMap {
    scan_voxel: S<f64>,
    voxel: S<f64>,
    cell: S<f64>,
    k: S<i64>,
    max_corr_dist: S<f64>,
    plane_tol: S<f64>,
    max_plane_dist: S<f64>,
    local_map_radius: S<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawFilter {
    dt_max: S<f64>,
    disjoint_policy: S<String>,
    static_window: S<f64>,
    static_min_samples: S<i64>,
    stillness_threshold: S<f64>,
    gravity: S<f64>,
    initial_velocity_radius: S<f64>,
    initial_attitude_radius: S<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSim {
    trajectory: S<String>,
    still: S<f64>,
    ramp: S<f64>,
    radius: S<f64>,
    period: S<f64>,
    velocity: S<[f64; 3]>,
    duration: S<f64>,
    imu_rate: S<f64>,
    lidar_rate: S<f64>,
    noise_mode: S<String>,
    b_r: S<f64>,
    b_phi_deg: S<f64>,
    b_a: S<f64>,
    b_g: S<f64>,
    accel_bias: S<[f64; 3]>,
    gyro_bias: S<[f64; 3]>,
    seed: S<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawOutput {
    dir: S<String>,
}

/// Value checks with line lookup into the source text.
struct Checker<'a> {
    src: &'a str,
}

#[derive(Clone, Copy)]
enum Range {
    Positive,
    NonNegative,
    AtLeast(f64),
}

impl Checker<'_> {
    fn line(&self, offset: usize) -> usize {
        self.src[..offset.min(self.src.len())].matches('\n').count() + 1
    }

    fn err<T>(&self, at: &Spanned<T>, message: String) -> ConfigError {
        ConfigError { line: Some(self.line(at.span().start)), message }
    }

    fn num(&self, key: &str, v: &S<f64>, default: f64, range: Range) -> Result<f64, ConfigError> {
        let Some(s) = v else { return Ok(default) };
        let x = *s.get_ref();
        let (ok, what) = match range {
            Range::Positive => (x > 0.0, "> 0".to_string()),
            Range::NonNegative => (x >= 0.0, ">= 0".to_string()),
            Range::AtLeast(m) => (x >= m, format!(">= {m}")),
        };
        if ok && x.is_finite() {
            Ok(x)
        } else {
            Err(self.err(s, format!("{key} must be finite and {what}, got {x}")))
        }
    }

    fn int(&self, key: &str, v: &S<i64>, default: usize, min: i64) -> Result<usize, ConfigError> {
        let Some(s) = v else { return Ok(default) };
        let x = *s.get_ref();
        if x >= min {
            Ok(x as usize)
        } else {
            Err(self.err(s, format!("{key} must be an integer >= {min}, got {x}")))
        }
    }

    fn vec3(&self, key: &str, v: &S<[f64; 3]>, default: Vector3<f64>) -> Result<Vector3<f64>, ConfigError> {
        let Some(s) = v else { return Ok(default) };
        let a = s.get_ref();
        if a.iter().all(|x| x.is_finite()) {
            Ok(Vector3::from_column_slice(a))
        } else {
            Err(self.err(s, format!("{key} must contain finite numbers")))
        }
    }

    fn choice<'s>(&self, key: &str, v: &'s S<String>, default: &'s str, allowed: &[&str]) -> Result<&'s str, ConfigError> {
        let Some(s) = v else { return Ok(default) };
        let x = s.get_ref().as_str();
        if allowed.contains(&x) {
            Ok(x)
        } else {
            Err(self.err(s, format!("{key} must be one of {}, got \"{x}\"", allowed.join(", "))))
        }
    }
}

impl RunConfig {
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let raw: Raw = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| src[..s.start.min(src.len())].matches('\n').count() + 1);
            ConfigError { line, message: e.message().trim().to_string() }
        })?;
        let c = Checker { src };
        use Range::*;

        let lidar = LidarNoiseSpec {
            b_r: c.num("lidar.b_r", &raw.lidar.b_r, 0.08, Positive)?,
            b_phi: c.num("lidar.b_phi_deg", &raw.lidar.b_phi_deg, 0.1, Positive)?.to_radians(),
        };
        let b_a = c.num("imu.b_a", &raw.imu.b_a, 0.2, Positive)?;
        let b_g = c.num("imu.b_g", &raw.imu.b_g, 0.07, Positive)?;
        let imu = ImuNoiseSpec {
            b_a,
            b_g,
            p_ba: box_shape3(c.num("imu.bias_a", &raw.imu.bias_a, 0.1 * b_a, Positive)?),
            p_bg: box_shape3(c.num("imu.bias_g", &raw.imu.bias_g, 0.1 * b_g, Positive)?),
        };

        let plane = PlaneParams {
            k: c.int("map.k", &raw.map.k, 5, 3)?,
            max_corr_dist: c.num("map.max_corr_dist", &raw.map.max_corr_dist, 1.0, Positive)?,
            plane_tol: c.num("map.plane_tol", &raw.map.plane_tol, 0.05, Positive)?,
            max_plane_dist: c.num("map.max_plane_dist", &raw.map.max_plane_dist, 0.2, Positive)?,
        };
        let icp = IcpParams {
            max_iterations: c.int("icp.max_iterations", &raw.icp.max_iterations, 30, 1)?,
            converge_tol: c.num("icp.converge_tol", &raw.icp.converge_tol, 1e-6, Positive)?,
            min_correspondences: c.int("icp.min_correspondences", &raw.icp.min_correspondences, 10, 6)?,
            cond_max: c.num("icp.cond_max", &raw.icp.cond_max, 1e8, AtLeast(1.0))?,
            max_halvings: c.int("icp.max_halvings", &raw.icp.max_halvings, 4, 0)?,
            freeze_tol: c.num("icp.freeze_tol", &raw.icp.freeze_tol, 1e-3, NonNegative)?,
            plane,
        };
        let nl_mode = match c.choice("icp.nonlinear_term", &raw.icp.nonlinear_term, "per_point", &["per_point", "single"])? {
            "single" => NonlinearTerm::Single,
            _ => NonlinearTerm::PerPoint,
        };
        let policy = match c.choice("filter.disjoint_policy", &raw.filter.disjoint_policy, "skip", &["skip", "strict"])? {
            "strict" => DisjointPolicy::Strict,
            _ => DisjointPolicy::Skip,
        };
        let odometry = OdometryParams {
            lidar,
            imu,
            extrinsics: Default::default(),
            icp,
            gate_tol: c.num("icp.gate_tol", &raw.icp.gate_tol, 1e-3, Positive)?,
            p_nl: Matrix6::identity() * c.num("icp.p_nl", &raw.icp.p_nl, 3e-8, NonNegative)?,
            nl_mode,
            scan_voxel: c.num("map.scan_voxel", &raw.map.scan_voxel, 0.65, Positive)?,
            map_voxel: c.num("map.voxel", &raw.map.voxel, 0.5, Positive)?,
            map_cell: c.num("map.cell", &raw.map.cell, 1.0, Positive)?,
            filter: FilterParams {
                dt_max: c.num("filter.dt_max", &raw.filter.dt_max, 0.02, Positive)?,
                local_map_radius: c.num("map.local_map_radius", &raw.map.local_map_radius, 50.0, Positive)?,
                update: UpdateOptions { policy, ..Default::default() },
            },
            static_window: c.num("filter.static_window", &raw.filter.static_window, 3.0, Positive)?,
            static_params: StaticInitParams {
                min_samples: c.int("filter.static_min_samples", &raw.filter.static_min_samples, 200, 1)?,
                stillness_threshold: c.num("filter.stillness_threshold", &raw.filter.stillness_threshold, 0.1, Positive)?,
            },
            gravity: c.num("filter.gravity", &raw.filter.gravity, 9.81, Positive)?,
            initial_velocity_radius: c.num(
                "filter.initial_velocity_radius",
                &raw.filter.initial_velocity_radius,
                0.01,
                NonNegative,
            )?,
            initial_attitude_radius: c.num(
                "filter.initial_attitude_radius",
                &raw.filter.initial_attitude_radius,
                0.02,
                NonNegative,
            )?,
        };

        let s = &raw.sim;
        let kind = match c.choice("sim.trajectory", &s.trajectory, "room_tour", &["room_tour", "stationary", "line", "circle"])? {
            "stationary" => TrajectoryKind::Stationary,
            "line" => TrajectoryKind::Line { velocity: c.vec3("sim.velocity", &s.velocity, Vector3::new(0.5, 0.0, 0.0))? },
            "circle" => TrajectoryKind::Circle {
                radius: c.num("sim.radius", &s.radius, 4.0, Positive)?,
                period: c.num("sim.period", &s.period, 30.0, Positive)?,
            },
            _ => TrajectoryKind::RoomTour {
                still: c.num("sim.still", &s.still, 3.0, NonNegative)?,
                ramp: c.num("sim.ramp", &s.ramp, 2.0, Positive)?,
            },
        };
        let mode = match c.choice("sim.noise_mode", &s.noise_mode, "uniform", &["uniform", "adversarial"])? {
            "adversarial" => NoiseMode::Adversarial,
            _ => NoiseMode::Uniform,
        };
        let sim = SimConfig {
            trajectory: TrajectorySpec {
                kind,
                duration: c.num("sim.duration", &s.duration, 60.0, Positive)?,
                imu_rate: c.num("sim.imu_rate", &s.imu_rate, 200.0, Positive)?,
                lidar_rate: c.num("sim.lidar_rate", &s.lidar_rate, 10.0, Positive)?,
            },
            world: World::default_room(),
            beams: BeamPattern::default(),
            noise: SimNoise {
                b_r: c.num("sim.b_r", &s.b_r, 0.08, NonNegative)?,
                b_phi: c.num("sim.b_phi_deg", &s.b_phi_deg, 0.1, NonNegative)?.to_radians(),
                b_a: c.num("sim.b_a", &s.b_a, 0.2, NonNegative)?,
                b_g: c.num("sim.b_g", &s.b_g, 0.07, NonNegative)?,
                mode,
            },
            accel_bias: c.vec3("sim.accel_bias", &s.accel_bias, Vector3::new(0.01, -0.005, 0.005))?,
            gyro_bias: c.vec3("sim.gyro_bias", &s.gyro_bias, Vector3::new(0.002, -0.001, 0.0015))?,
            gravity: odometry.gravity,
            seed: c.int("sim.seed", &s.seed, 0, 0)? as u64,
        };
        let output_dir = match &raw.output.dir {
            Some(d) if d.get_ref().is_empty() => return Err(c.err(d, "output.dir must not be empty".into())),
            Some(d) => PathBuf::from(d.get_ref()),
            None => PathBuf::from("out"),
        };
        Ok(RunConfig { odometry, sim, output_dir })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&src).map_err(|e| ConfigError { message: format!("{}: {}", path.display(), e.message), ..e })
    }
}
