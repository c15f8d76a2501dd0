//! Trajectory metrics: cover rate, average interval length, ATE and
//! end-to-end error.

use nalgebra::{Matrix3, Vector3, SVD};
use thiserror::Error;

use crate::manifold::Rotation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {est} estimates vs {gt} ground-truth positions")]
    LengthMismatch { est: usize, gt: usize },
    #[error("protection shape at t = {0} is not positive definite")]
    BadShape(f64),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: Rotation,
    /// Global translation protection shape.
    pub shape_t: Matrix3<f64>,
    /// Running (local) translation shape, when known.
    pub shape_t_local: Option<Matrix3<f64>>,
    pub shape_theta: Option<Matrix3<f64>>,
}

impl TrajectoryRecord {
    pub fn new(timestamp: f64, translation: Vector3<f64>, shape_t: Matrix3<f64>) -> Self {
        Self { timestamp, translation, rotation: Rotation::identity(), shape_t, shape_t_local: None, shape_theta: None }
    }
}

/// Which translation set a metric reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SetChoice {
    #[default]
    Global,
    Local,
}

fn shape_of(r: &TrajectoryRecord, which: SetChoice) -> Matrix3<f64> {
    match which {
        SetChoice::Global => r.shape_t,
        SetChoice::Local => r.shape_t_local.unwrap_or(r.shape_t),
    }
}

/// `(x)ᵀ P⁻¹ (x)`, or `None` when `P` is not positive definite.
pub fn quadratic_form(shape: &Matrix3<f64>, x: &Vector3<f64>) -> Option<f64> {
    let ch = shape.cholesky()?;
    Some(x.dot(&ch.solve(x)))
}

/// Pairs each estimate with the nearest ground-truth timestamp within `tol`.
/// Both inputs must be sorted; returns `(estimate index, gt index)` pairs.
pub fn associate(est_times: &[f64], gt_times: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &t) in est_times.iter().enumerate() {
        let k = gt_times.partition_point(|&g| g < t);
        let best = [k.checked_sub(1), (k < gt_times.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt_times[a] - t).abs().total_cmp(&(gt_times[b] - t).abs()));
        if let Some(j) = best.filter(|&j| (gt_times[j] - t).abs() <= tol) {
            out.push((i, j));
        }
    }
    out
}

/// Percentage of records whose ground-truth position is inside the
/// protection ellipsoid centered at the estimate.
pub fn cover_rate(est: &[TrajectoryRecord], gt: &[Vector3<f64>]) -> Result<f64> {
    cover_rate_with(est, gt, SetChoice::Global)
}

pub fn cover_rate_with(est: &[TrajectoryRecord], gt: &[Vector3<f64>], which: SetChoice) -> Result<f64> {
    check_pairs(est.len(), gt.len())?;
    let mut covered = 0usize;
    for (r, g) in est.iter().zip(gt) {
        let q = quadratic_form(&shape_of(r, which), &(g - r.translation)).ok_or(EvalError::BadShape(r.timestamp))?;
        if q <= 1.0 {
            covered += 1;
        }
    }
    Ok(100.0 * covered as f64 / est.len() as f64)
}

fn check_pairs(est: usize, gt: usize) -> Result<()> {
    if est != gt {
        return Err(EvalError::LengthMismatch { est, gt });
    }
    if est == 0 {
        return Err(EvalError::Empty("no associated records"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AilMode {
    /// Interval half-width `√P_ii`.
    #[default]
    Deterministic,
    /// Interval half-width `3√P_ii` for covariance outputs.
    ThreeSigma,
}

/// Average over records and axes of the per-axis interval length.
pub fn ail(records: &[TrajectoryRecord], mode: AilMode) -> Result<f64> {
    ail_with(records, mode, SetChoice::Global)
}

pub fn ail_with(records: &[TrajectoryRecord], mode: AilMode, which: SetChoice) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::Empty("no records"));
    }
    let k = match mode {
        AilMode::Deterministic => 2.0,
        AilMode::ThreeSigma => 6.0,
    };
    let total: f64 = records
        .iter()
        .map(|r| {
            let p = shape_of(r, which);
            (0..3).map(|i| k * p[(i, i)].max(0.0).sqrt()).sum::<f64>() / 3.0
        })
        .sum();
    Ok(total / records.len() as f64)
}

/// Rigid transform `(R, t)` minimizing `Σ |R e_i + t - g_i|²`.
pub fn align_rigid(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    check_pairs(est.len(), gt.len())?;
    let n = est.len() as f64;
    let me = est.iter().sum::<Vector3<f64>>() / n;
    let mg = gt.iter().sum::<Vector3<f64>>() / n;
    let cov = est.iter().zip(gt).fold(Matrix3::zeros(), |acc, (e, g)| acc + (g - mg) * (e - me).transpose());
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Ok((r, mg - r * me))
}

/// Root-mean-square position error, optionally after rigid alignment.
pub fn ate(est: &[Vector3<f64>], gt: &[Vector3<f64>], align: bool) -> Result<f64> {
    check_pairs(est.len(), gt.len())?;
    let (r, t) = if align { align_rigid(est, gt)? } else { (Matrix3::identity(), Vector3::zeros()) };
    let sum: f64 = est.iter().zip(gt).map(|(e, g)| (r * e + t - g).norm_squared()).sum();
    Ok((sum / est.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndToEnd {
    /// Estimated start-to-end offset minus the true one.
    pub error: Vector3<f64>,
    pub error_norm: f64,
    /// Whether the error lies in the final protection ellipsoid.
    pub covered: bool,
}

pub fn end_to_end_error(est: &[TrajectoryRecord], gt: &[Vector3<f64>]) -> Result<EndToEnd> {
    check_pairs(est.len(), gt.len())?;
    let (first, last) = (&est[0], &est[est.len() - 1]);
    let error = (last.translation - first.translation) - (gt[gt.len() - 1] - gt[0]);
    let q = quadratic_form(&last.shape_t, &error).ok_or(EvalError::BadShape(last.timestamp))?;
    Ok(EndToEnd { error, error_norm: error.norm(), covered: q <= 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub assoc_tol: f64,
    pub align: bool,
    pub ail_mode: AilMode,
    pub set: SetChoice,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { assoc_tol: 0.01, align: false, ail_mode: AilMode::Deterministic, set: SetChoice::Global }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub records: usize,
    pub matched: usize,
    pub unmatched: usize,
    pub cover_rate: f64,
    pub ail: f64,
    pub ate: f64,
    pub end_to_end: EndToEnd,
}

impl Report {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "records = {}\nmatched = {}\nunmatched = {}\ncr_percent = {:.3}\nail_m = {:.6}\nate_m = {:.6}\nend_to_end_m = {:.6}\nending_covered = {}\n",
            self.records, self.matched, self.unmatched, self.cover_rate, self.ail, self.ate, self.end_to_end.error_norm, self.end_to_end.covered
        )
    }

    /// One row of a `CR / AIL | ATE` comparison table.
    pub fn table_row(&self, name: &str) -> String {
        format!("| {name} | {:.3} / {:.3} | {:.3} |", self.cover_rate, self.ail, self.ate)
    }
}

/// Associates the estimate with ground truth and computes every metric.
pub fn evaluate(est: &[TrajectoryRecord], gt: &[(f64, Vector3<f64>)], opts: &EvalOptions) -> Result<Report> {
    let est_t: Vec<f64> = est.iter().map(|r| r.timestamp).collect();
    let gt_t: Vec<f64> = gt.iter().map(|g| g.0).collect();
    let pairs = associate(&est_t, &gt_t, opts.assoc_tol);
    if pairs.is_empty() {
        return Err(EvalError::Empty("no estimate matched a ground-truth timestamp"));
    }
    let recs: Vec<TrajectoryRecord> = pairs.iter().map(|&(i, _)| est[i]).collect();
    let pos: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].1).collect();
    let est_pos: Vec<Vector3<f64>> = recs.iter().map(|r| r.translation).collect();
    Ok(Report {
        records: est.len(),
        matched: pairs.len(),
        unmatched: est.len() - pairs.len(),
        cover_rate: cover_rate_with(&recs, &pos, opts.set)?,
        ail: ail_with(&recs, opts.ail_mode, opts.set)?,
        ate: ate(&est_pos, &pos, opts.align)?,
        end_to_end: end_to_end_error(&recs, &pos)?,
    })
}
