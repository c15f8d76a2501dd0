//! Simulates one episode, runs the odometry on it and prints the metrics.
//!
//! cargo run --release -p ubb-lio --example episode -- [seed] [adversarial | noiseless [b_r b_phi b_a b_g p_nl plane_tol max_plane_dist]]
//!
//! Set TRACE=1 to print every tenth step.

use std::time::Instant;

use nalgebra::{Matrix6, Vector3};
use ubb_lio::evaluation::{evaluate, EvalOptions};
use ubb_lio::pipeline::{run_odometry, OdometryParams};
use ubb_lio::sensing::{ImuNoiseSpec, LidarNoiseSpec};
use ubb_lio::simulation::{simulate_episode, NoiseMode, SimConfig, SimNoise};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = SimConfig { seed, ..Default::default() };
    let mut params = OdometryParams::default();
    match args.get(2).map(String::as_str) {
        Some("adversarial") => cfg.noise.mode = NoiseMode::Adversarial,
        Some("noiseless") => {
            cfg.noise = SimNoise::zero();
            cfg.accel_bias = Vector3::zeros();
            cfg.gyro_bias = Vector3::zeros();
            let f = |i: usize| args.get(i).and_then(|s| s.parse::<f64>().ok());
            params.lidar = LidarNoiseSpec::new(f(3).unwrap_or(1e-6), f(4).unwrap_or(1e-8)).unwrap();
            params.imu = ImuNoiseSpec::new(f(5).unwrap_or(1e-2), f(6).unwrap_or(1e-3)).unwrap();
            params.p_nl = Matrix6::identity() * f(7).unwrap_or(1e-12);
            params.initial_velocity_radius = 1e-6;
            params.initial_attitude_radius = 1e-6;
            params.icp.plane.plane_tol = f(8).unwrap_or(1e-4);
            params.icp.plane.max_plane_dist = f(9).unwrap_or(0.01);
        }
        _ => {}
    }
    let t = Instant::now();
    let ep = simulate_episode(&cfg).expect("simulate");
    println!("simulated in {:.2} s", t.elapsed().as_secs_f64());
    let imu = ep.imu.samples.clone();
    let scans: Vec<_> = ep.scans.iter().map(|s| s.scan.clone()).collect();
    let t = Instant::now();
    let out = run_odometry(&imu, &scans, &params).expect("run");
    println!("ran in {:.2} s", t.elapsed().as_secs_f64());
    let gt: Vec<_> = ep.scan_truth.iter().map(|s| (s.timestamp, s.position)).collect();
    let report = evaluate(&out.trajectory(), &gt, &EvalOptions::default()).expect("eval");
    print!("{}", report.to_text());
    let n = out.steps.len() as f64;
    let mean = |f: &dyn Fn(&ubb_lio::pipeline::StepRecord) -> f64| out.steps.iter().map(f).sum::<f64>() / n;
    println!("gated = {} disjoint = {}", out.gated_count(), out.disjoint_count());
    println!(
        "mean points {:.0} selected {:.0} corr {:.0} iters {:.1}",
        mean(&|s| s.scan_points as f64),
        mean(&|s| s.selected_points as f64),
        mean(&|s| s.correspondences as f64),
        mean(&|s| s.icp_iterations as f64)
    );
    println!(
        "mean ms: total {:.1} icp {:.1} unc {:.1} upd {:.2} map {:.1}",
        mean(&|s| s.timing.total) * 1e3,
        mean(&|s| s.timing.icp) * 1e3,
        mean(&|s| s.timing.uncertainty) * 1e3,
        mean(&|s| s.timing.update) * 1e3,
        mean(&|s| s.timing.mapping) * 1e3
    );
    let worst = out
        .steps
        .iter()
        .zip(&ep.scan_truth)
        .map(|(s, g)| {
            let e = g.position - s.state.translation;
            (e.transpose() * s.shape_t_global.try_inverse().unwrap() * e)[0]
        })
        .fold(0.0f64, f64::max);
    println!("worst quadratic form {worst:.4}");
    if std::env::var("TRACE").is_ok() {
        for (s, g) in out.steps.iter().zip(&ep.scan_truth).step_by(10) {
            let e = g.position - s.state.translation;
            let th = (s.state.rotation.inverse() * g.rotation).log().unwrap().norm();
            println!("{:6.2} err {:.2e} {:.2e} {:.2e} rot {:.2e} pl {:.2e} {:?}", s.timestamp, e.x, e.y, e.z, th, s.shape_t_global[(0,0)].sqrt(), s.kind);
        }
    }
}
