//! Standalone SVG plots: per-axis error against the protection envelope and
//! a top-down trajectory.

use std::fmt::Write as _;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 300.0;
pub const TRAJ_SIZE: f64 = 600.0;
const MARGIN: f64 = 50.0;

/// One sample of a per-axis plot: time, estimation error and envelope radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSample {
    pub t: f64,
    pub error: f64,
    pub radius: f64,
}

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self { lo, hi, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn polyline(out: &mut String, pts: impl Iterator<Item = (f64, f64)>, stroke: &str) {
    let coords: Vec<String> = pts.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="{stroke}" stroke-width="1.2" points="{}"/>"#, coords.join(" "));
}

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, w / 2.0);
}

fn frame(out: &mut String, w: f64, h: f64, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (MARGIN, w - MARGIN / 2.0, MARGIN / 1.5, h - MARGIN);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    let _ = writeln!(out, r#"<text x="{l}" y="{}" font-family="sans-serif" font-size="11">{:.3}</text>"#, b + 15.0, x.0);
    let _ = writeln!(out, r#"<text x="{r}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#, b + 15.0, x.1);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{xlabel}</text>"#, (l + r) / 2.0, h - 10.0);
    let _ = writeln!(out, r#"<text x="{}" y="{b}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#, l - 4.0, y.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#, l - 4.0, t + 10.0, y.1);
    let _ = writeln!(out, r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">{ylabel}</text>"#, (t + b) / 2.0, (t + b) / 2.0);
}

/// Error curve with the `±radius` envelope around zero (the estimate).
pub fn axis_svg(axis: &str, samples: &[AxisSample]) -> String {
    let t_lo = samples.iter().map(|s| s.t).fold(f64::INFINITY, f64::min);
    let t_hi = samples.iter().map(|s| s.t).fold(f64::NEG_INFINITY, f64::max);
    let y_max = samples.iter().map(|s| s.radius.max(s.error.abs())).fold(0.0, f64::max) * 1.05;
    let (w, h) = (WIDTH, HEIGHT);
    let xs = Scale::new(t_lo, t_hi, MARGIN, w - MARGIN / 2.0);
    let ys = Scale::new(-y_max, y_max, h - MARGIN, MARGIN / 1.5);
    let mut out = String::new();
    header(&mut out, w, h, &format!("{axis} error and protection level"));
    frame(&mut out, w, h, (xs.lo, xs.hi), (ys.lo, ys.hi), "time [s]", &format!("{axis} [m]"));
    polyline(&mut out, samples.iter().map(|s| (xs.map(s.t), ys.map(s.radius))), "#1f77b4");
    polyline(&mut out, samples.iter().map(|s| (xs.map(s.t), ys.map(-s.radius))), "#1f77b4");
    polyline(&mut out, samples.iter().map(|s| (xs.map(s.t), ys.map(s.error))), "#d62728");
    out.push_str("</svg>\n");
    out
}

/// Top-down (x-y) view of the estimated and true trajectories.
pub fn trajectory_svg(est: &[(f64, f64)], gt: &[(f64, f64)]) -> String {
    let all = est.iter().chain(gt);
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    // Equal scale on both axes.
    let half = ((x_hi - x_lo).max(y_hi - y_lo) * 0.55).max(0.5);
    let (cx, cy) = ((x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0);
    let s = TRAJ_SIZE;
    let xs = Scale::new(cx - half, cx + half, MARGIN, s - MARGIN / 2.0);
    let ys = Scale::new(cy - half, cy + half, s - MARGIN, MARGIN / 1.5);
    let mut out = String::new();
    header(&mut out, s, s, "trajectory (top view)");
    frame(&mut out, s, s, (xs.lo, xs.hi), (ys.lo, ys.hi), "x [m]", "y [m]");
    polyline(&mut out, gt.iter().map(|&(x, y)| (xs.map(x), ys.map(y))), "#2ca02c");
    polyline(&mut out, est.iter().map(|&(x, y)| (xs.map(x), ys.map(y))), "#d62728");
    out.push_str("</svg>\n");
    out
}
