//! Sensor data types, bounded-noise models and static IMU initialization.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::ellipsoid::{floor_eigenvalues, PSD_FLOOR};
use crate::manifold::{skew, tangent_basis_unchecked, Rotation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensingError {
    #[error("range must be positive and finite, got {0}")]
    BadRange(f64),
    #[error("bearing must be a unit vector, got norm {0}")]
    BadBearing(f64),
    #[error("noise bound {name} must be positive and finite, got {value}")]
    BadBound { name: &'static str, value: f64 },
    #[error("static initialization needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("motion detected during static initialization: accel variance {variance:.4} exceeds {threshold:.4} (m/s^2)^2")]
    NotStill { variance: f64, threshold: f64 },
    #[error("non-finite IMU sample at t = {0}")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, SensingError>;

/// One LiDAR return as range and bearing in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMeasurement {
    pub timestamp: f64,
    pub range: f64,
    pub bearing: Vector3<f64>,
}

impl PointMeasurement {
    pub fn new(timestamp: f64, range: f64, bearing: Vector3<f64>) -> Result<Self> {
        if !(range > 0.0 && range.is_finite()) {
            return Err(SensingError::BadRange(range));
        }
        let norm = bearing.norm();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(SensingError::BadBearing(norm));
        }
        Ok(Self { timestamp, range, bearing })
    }

    /// Recovers range and bearing from a Cartesian point.
    pub fn from_xyz(timestamp: f64, p: &Vector3<f64>) -> Result<Self> {
        let range = p.norm();
        if !(range > 0.0 && range.is_finite()) {
            return Err(SensingError::BadRange(range));
        }
        Ok(Self { timestamp, range, bearing: p / range })
    }

    pub fn point(&self) -> Vector3<f64> {
        self.bearing * self.range
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub timestamp: f64,
    pub points: Vec<PointMeasurement>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarNoiseSpec {
    /// Range bound, meters.
    pub b_r: f64,
    /// Bearing bound, radians.
    pub b_phi: f64,
}

impl LidarNoiseSpec {
    pub fn new(b_r: f64, b_phi: f64) -> Result<Self> {
        check_bound("b_r", b_r)?;
        check_bound("b_phi", b_phi)?;
        Ok(Self { b_r, b_phi })
    }
}

impl Default for LidarNoiseSpec {
    fn default() -> Self {
        Self { b_r: 0.08, b_phi: 0.1f64.to_radians() }
    }
}

fn check_bound(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SensingError::BadBound { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseSpec {
    /// Accelerometer noise bound, m/s².
    pub b_a: f64,
    /// Gyroscope noise bound, rad/s.
    pub b_g: f64,
    /// Shape bounding the residual accelerometer bias after initialization.
    pub p_ba: Matrix3<f64>,
    /// Shape bounding the residual gyroscope bias after initialization.
    pub p_bg: Matrix3<f64>,
}

impl ImuNoiseSpec {
    /// Bias shapes default to the box of a tenth of the noise bound.
    pub fn new(b_a: f64, b_g: f64) -> Result<Self> {
        check_bound("b_a", b_a)?;
        check_bound("b_g", b_g)?;
        Ok(Self {
            b_a,
            b_g,
            p_ba: box_shape3(0.1 * b_a),
            p_bg: box_shape3(0.1 * b_g),
        })
    }

    /// Shape of the white accelerometer noise box.
    pub fn n_a(&self) -> Matrix3<f64> {
        box_shape3(self.b_a)
    }

    pub fn n_g(&self) -> Matrix3<f64> {
        box_shape3(self.b_g)
    }
}

impl Default for ImuNoiseSpec {
    fn default() -> Self {
        Self::new(0.2, 0.07).expect("default bounds are positive")
    }
}

/// `diag(3b², 3b², 3b²)`: outer ellipsoid of the cube `[-b, b]³`.
pub fn box_shape3(b: f64) -> Matrix3<f64> {
    Matrix3::identity() * (3.0 * b * b)
}

/// LiDAR-to-IMU transform, taken as exact.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Extrinsics {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

/// The measured point in the IMU frame and the shape of the ellipsoid that
/// bounds the true point's deviation from it.
pub fn point_noise_ellipsoid(
    m: &PointMeasurement,
    spec: &LidarNoiseSpec,
    ext: &Extrinsics,
) -> (Vector3<f64>, Matrix3<f64>) {
    let r = ext.rotation.matrix();
    let point = r * m.point() + ext.translation;
    let n = tangent_basis_unchecked(&m.bearing);
    let across = -skew(&m.bearing) * n * m.range;
    let mut a = Matrix3::zeros();
    a.set_column(0, &m.bearing);
    a.fixed_view_mut::<3, 2>(0, 1).copy_from(&across);
    let d = Vector3::new(3.0 * spec.b_r * spec.b_r, 3.0 * spec.b_phi * spec.b_phi, 3.0 * spec.b_phi * spec.b_phi);
    let ra = r * a;
    let mut shape = ra * Matrix3::from_diagonal(&d) * ra.transpose();
    shape = (shape + shape.transpose()) * 0.5;
    (point, floor3(shape))
}

pub(crate) fn floor3(shape: Matrix3<f64>) -> Matrix3<f64> {
    let min = shape.symmetric_eigenvalues().min();
    if min >= PSD_FLOOR {
        return shape;
    }
    let mut d = nalgebra::DMatrix::from_column_slice(3, 3, shape.as_slice());
    floor_eigenvalues(&mut d, PSD_FLOOR);
    Matrix3::from_column_slice(d.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticInitParams {
    pub min_samples: usize,
    /// Largest per-axis accelerometer variance still considered motionless.
    pub stillness_threshold: f64,
}

impl Default for StaticInitParams {
    fn default() -> Self {
        Self { min_samples: 200, stillness_threshold: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticInit {
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub gravity_w: Vector3<f64>,
    pub initial_rotation: Rotation,
}

/// Biases, gravity and initial attitude from a motionless IMU window.
///
/// The attitude is the smallest rotation taking the mean specific force onto
/// `+z`; the accelerometer bias only absorbs the magnitude mismatch, since a
/// tilt and a horizontal bias are indistinguishable while still.
pub fn static_initialize(samples: &[ImuSample], gravity_magnitude: f64, params: &StaticInitParams) -> Result<StaticInit> {
    if samples.len() < params.min_samples || samples.is_empty() {
        return Err(SensingError::TooFewSamples { needed: params.min_samples.max(1), got: samples.len() });
    }
    if let Some(bad) = samples.iter().find(|s| !(s.accel.iter().chain(s.gyro.iter()).all(|v| v.is_finite()))) {
        return Err(SensingError::NonFinite(bad.timestamp));
    }
    let k = samples.len() as f64;
    let mean_a = samples.iter().fold(Vector3::zeros(), |acc, s| acc + s.accel) / k;
    let mean_g = samples.iter().fold(Vector3::zeros(), |acc, s| acc + s.gyro) / k;
    let var = samples
        .iter()
        .fold(Vector3::zeros(), |acc: Vector3<f64>, s| acc + (s.accel - mean_a).component_mul(&(s.accel - mean_a)))
        / k;
    let variance = var.max();
    if variance > params.stillness_threshold {
        return Err(SensingError::NotStill { variance, threshold: params.stillness_threshold });
    }
    let norm = mean_a.norm();
    let dir = mean_a / norm;
    let up = Vector3::z();
    let axis = dir.cross(&up);
    let s = axis.norm();
    let c = dir.dot(&up);
    let phi = if s < 1e-12 {
        if c > 0.0 { Vector3::zeros() } else { Vector3::new(std::f64::consts::PI, 0.0, 0.0) }
    } else {
        axis / s * s.atan2(c)
    };
    Ok(StaticInit {
        accel_bias: dir * (norm - gravity_magnitude),
        gyro_bias: mean_g,
        gravity_w: Vector3::new(0.0, 0.0, -gravity_magnitude),
        initial_rotation: Rotation::exp(&phi),
    })
}
