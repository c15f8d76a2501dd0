//! Shared scene and sampling helpers for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use ubb_lio::ellipsoid::Ellipsoid;
use ubb_lio::manifold::{se3_exp, se3_log, Pose, Twist};
use ubb_lio::mapping::{voxel_downsample_indices, PointMap};
use ubb_lio::registration::{gauss_newton_step, Correspondence, IcpResult};
use ubb_lio::sensing::{point_noise_ellipsoid, Extrinsics, LidarNoiseSpec};
use ubb_lio::simulation::{synthesize_scan, BeamPattern, SimNoise, World};

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Uniform in the unit ball, or on the unit sphere when `boundary`.
pub fn unit_ball(rng: &mut impl Rng, n: usize, boundary: bool) -> DVector<f64> {
    let g = gaussian_vec(rng, n);
    let dir = &g / g.norm();
    if boundary { dir } else { dir * rng.random::<f64>().powf(1.0 / n as f64) }
}

/// SPD matrix with eigenvalues spread over a few decades.
pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = a.qr().q();
    let d = DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-2.0..1.0)));
    &q * DMatrix::from_diagonal(&d) * q.transpose()
}

/// Maps unit-ball samples into `E(c, P)` as `c + L u` with `P = L Lᵀ`.
pub struct BallMap {
    center: DVector<f64>,
    l: DMatrix<f64>,
}

impl BallMap {
    pub fn new(e: &Ellipsoid) -> Self {
        Self { center: e.center().clone(), l: e.shape().clone().cholesky().expect("shape is positive definite").l() }
    }

    pub fn map(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.center + &self.l * u
    }
}

/// Exact map of the world: every patch sampled on a regular grid.
pub fn exact_map(world: &World, spacing: f64) -> PointMap {
    let mut pts = Vec::new();
    for p in &world.patches {
        let nu = (2.0 * p.half_u / spacing).floor() as i64;
        let nv = (2.0 * p.half_v / spacing).floor() as i64;
        for i in 0..=nu {
            for j in 0..=nv {
                let (a, b) = (-p.half_u + i as f64 * spacing, -p.half_v + j as f64 * spacing);
                pts.push(p.anchor + p.axis_u * a + p.axis_v * b);
            }
        }
    }
    let mut map = PointMap::new(1.0);
    map.insert_raw(&pts);
    map
}

/// One noisy scan from `pose`, voxel-selected, with per-point noise shapes.
pub fn noisy_points(
    pose: &Pose,
    world: &World,
    pattern: &BeamPattern,
    noise: &SimNoise,
    voxel: f64,
    rng: &mut impl RngCore,
) -> Vec<(Vector3<f64>, Matrix3<f64>)> {
    let scan = synthesize_scan(0.0, pose, world, pattern, noise, rng);
    let spec = LidarNoiseSpec::new(noise.b_r.max(1e-9), noise.b_phi.max(1e-12)).unwrap();
    let measured: Vec<_> = scan.scan.points.iter().map(|m| point_noise_ellipsoid(m, &spec, &Extrinsics::default())).collect();
    let positions: Vec<_> = measured.iter().map(|m| m.0).collect();
    voxel_downsample_indices(&positions, voxel).into_iter().map(|i| measured[i]).collect()
}

/// Gauss-Newton on fixed correspondences until the step is negligible.
pub fn solve_fixed(corr: &[Correspondence], start: &Pose) -> Pose {
    let mut pose = *start;
    for _ in 0..50 {
        let step = gauss_newton_step(corr, &pose, f64::INFINITY).expect("well-posed");
        pose = pose.compose(&se3_exp(&step));
        if step.norm() < 1e-15 {
            break;
        }
    }
    pose
}

/// A result moved to the exact optimum of its own correspondences.
pub fn polished(res: &IcpResult) -> IcpResult {
    let pose = solve_fixed(&res.correspondences, &res.pose);
    IcpResult { pose, last_increment: Twist::zero(), converged: true, ..res.clone() }
}

/// `ξ` with `b = a · Exp(ξ)`.
pub fn increment(a: &Pose, b: &Pose) -> Twist {
    se3_log(&a.inverse().compose(b)).expect("small increment")
}
