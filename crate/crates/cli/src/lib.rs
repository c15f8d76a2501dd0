//! Commands behind the `ubb-lio` binary. Each returns a [`CliError`] that
//! carries the process exit code.

pub mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ubb_lio::config::{ConfigError, RunConfig};
use ubb_lio::dataset::{self, DataError, ProtectionRow, TumPose};
use ubb_lio::evaluation::{self, EvalOptions, Report, TrajectoryRecord};
use ubb_lio::filter::FilterError;
use ubb_lio::nalgebra::Vector3;
use ubb_lio::pipeline::{self, OdometryOutput, PipelineError};
use ubb_lio::simulation;

use plot::AxisSample;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const EST_FILE: &str = "est.tum";
pub const PROTECTION_FILE: &str = "protection.csv";
pub const PROTECTION_LOCAL_FILE: &str = "protection_local.csv";
pub const MAP_FILE: &str = "map.xyz";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Filter(FilterError::Timing { .. }) => EXIT_DATA,
            PipelineError::Filter(_) => EXIT_RUNTIME,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// The configuration at `path`, or the built-in defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e: ConfigError| CliError::config(e.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulateSummary {
    pub imu_rows: usize,
    pub scans: usize,
}

/// Simulates one episode and writes it as a dataset directory.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary> {
    let episode = simulation::simulate_episode(&cfg.sim).map_err(|e| CliError::config(e.to_string()))?;
    dataset::write_episode(out, &episode)?;
    Ok(SimulateSummary { imu_rows: episode.imu.samples.len(), scans: episode.scans.len() })
}

/// Runs the odometry on a dataset directory and writes the estimate, the
/// protection levels, the map and per-scan timing into `out`.
pub fn run(cfg: &RunConfig, data: &Path, out: &Path) -> Result<OdometryOutput> {
    let ds = dataset::read_dataset(data)?;
    let output = pipeline::run_odometry(&ds.imu, &ds.scans, &cfg.odometry)?;
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let poses: Vec<TumPose> =
        output.steps.iter().map(|s| TumPose { timestamp: s.timestamp, pose: pipeline::step_pose(s) }).collect();
    dataset::write_tum(&out.join(EST_FILE), &poses)?;
    let global: Vec<ProtectionRow> =
        output.steps.iter().map(|s| ProtectionRow { timestamp: s.timestamp, shape: s.shape_t_global }).collect();
    dataset::write_protection(&out.join(PROTECTION_FILE), &global)?;
    let local: Vec<ProtectionRow> =
        output.steps.iter().map(|s| ProtectionRow { timestamp: s.timestamp, shape: s.shape_t_local }).collect();
    dataset::write_protection(&out.join(PROTECTION_LOCAL_FILE), &local)?;
    dataset::write_xyz(&out.join(MAP_FILE), output.map.points())?;
    dataset::write_timing(&out.join(TIMING_FILE), &output.steps)?;
    Ok(output)
}

/// One line per run, for logs.
pub fn run_summary(out: &OdometryOutput) -> String {
    let n = out.steps.len().max(1) as f64;
    let mean = |f: fn(&pipeline::StepTiming) -> f64| out.steps.iter().map(|s| f(&s.timing)).sum::<f64>() / n * 1e3;
    format!(
        "scans = {}, gated = {}, disjoint = {}, map points = {}, mean step = {:.2} ms (icp {:.2} ms)",
        out.steps.len(),
        out.gated_count(),
        out.disjoint_count(),
        out.map.len(),
        mean(|t| t.total),
        mean(|t| t.icp),
    )
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub est: PathBuf,
    pub protection: PathBuf,
    pub gt: PathBuf,
    pub options: EvalOptions,
}

impl EvalArgs {
    pub fn new(est: PathBuf, protection: PathBuf, gt: PathBuf) -> Self {
        Self { est, protection, gt, options: EvalOptions::default() }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{}: file not found", path.display())))
    }
}

/// Estimated poses joined with their protection levels, row by row.
pub fn load_records(est: &Path, protection: &Path) -> Result<Vec<TrajectoryRecord>> {
    require(est)?;
    require(protection)?;
    let poses = dataset::read_tum(est)?;
    let shapes = dataset::read_protection(protection)?;
    if poses.len() != shapes.len() {
        return Err(CliError::data(format!(
            "{} has {} rows but {} has {}",
            est.display(),
            poses.len(),
            protection.display(),
            shapes.len()
        )));
    }
    poses
        .iter()
        .zip(&shapes)
        .enumerate()
        .map(|(i, (p, s))| {
            if (p.timestamp - s.timestamp).abs() > 1e-6 {
                return Err(CliError::data(format!(
                    "{}: row {} time {} does not match pose time {}",
                    protection.display(),
                    i + 2,
                    s.timestamp,
                    p.timestamp
                )));
            }
            let mut r = TrajectoryRecord::new(p.timestamp, p.pose.translation, s.shape);
            r.rotation = p.pose.rotation;
            Ok(r)
        })
        .collect()
}

pub fn load_ground_truth(gt: &Path) -> Result<Vec<(f64, Vector3<f64>)>> {
    require(gt)?;
    Ok(dataset::read_tum(gt)?.into_iter().map(|p| (p.timestamp, p.pose.translation)).collect())
}

/// Metrics of one run. Any protection file works, e.g. the local one
/// written next to the global one.
pub fn eval(args: &EvalArgs) -> Result<Report> {
    let gt = load_ground_truth(&args.gt)?;
    let records = load_records(&args.est, &args.protection)?;
    evaluation::evaluate(&records, &gt, &args.options).map_err(|e| CliError::data(e.to_string()))
}

/// Writes `x.svg`, `y.svg`, `z.svg` and `trajectory.svg` into `out`.
pub fn plot(est: &Path, protection: &Path, gt: &Path, out: &Path, assoc_tol: f64) -> Result<Vec<PathBuf>> {
    let records = load_records(est, protection)?;
    let truth = load_ground_truth(gt)?;
    let est_t: Vec<f64> = records.iter().map(|r| r.timestamp).collect();
    let gt_t: Vec<f64> = truth.iter().map(|g| g.0).collect();
    let pairs = evaluation::associate(&est_t, &gt_t, assoc_tol);
    if pairs.is_empty() {
        return Err(CliError::data(format!(
            "no estimate in {} matches a ground-truth time in {}",
            est.display(),
            gt.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let mut written = Vec::new();
    for (k, axis) in ["x", "y", "z"].iter().enumerate() {
        let samples: Vec<AxisSample> = pairs
            .iter()
            .map(|&(i, j)| AxisSample {
                t: records[i].timestamp,
                error: truth[j].1[k] - records[i].translation[k],
                radius: records[i].shape_t[(k, k)].max(0.0).sqrt(),
            })
            .collect();
        let path = out.join(format!("{axis}.svg"));
        write_text(&path, &plot::axis_svg(axis, &samples))?;
        written.push(path);
    }
    let e: Vec<(f64, f64)> = records.iter().map(|r| (r.translation.x, r.translation.y)).collect();
    let g: Vec<(f64, f64)> = truth.iter().map(|g| (g.1.x, g.1.y)).collect();
    let path = out.join("trajectory.svg");
    write_text(&path, &plot::trajectory_svg(&e, &g))?;
    written.push(path);
    Ok(written)
}

/// Converts a `x,y,z` cloud into the range-bearing scan format.
pub fn convert(xyz: &Path, timestamp: f64, out: &Path) -> Result<usize> {
    require(xyz)?;
    let scan = dataset::read_xyz_cloud(xyz, timestamp)?;
    dataset::write_scan(out, &scan)?;
    Ok(scan.points.len())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
