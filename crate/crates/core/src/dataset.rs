//! Dataset files: IMU and scan CSVs, TUM trajectories, protection levels,
//! timing tables and converted `x,y,z` clouds.

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::manifold::{Pose, Rotation};
use crate::pipeline::StepRecord;
use crate::sensing::{ImuSample, PointMeasurement, Scan};
use crate::simulation::Episode;

pub const IMU_HEADER: &str = "t,ax,ay,az,gx,gy,gz";
pub const SCAN_HEADER: &str = "t,range,bx,by,bz";
pub const PROTECTION_HEADER: &str = "t,p11,p12,p13,p22,p23,p33";
pub const TIMING_HEADER: &str = "t,points,selected,correspondences,iterations,preprocess_ms,icp_ms,uncertainty_ms,update_ms,mapping_ms,total_ms";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: row {row}: {message}")]
    Parse { path: PathBuf, row: usize, message: String },
    #[error("{0}: no data rows")]
    Empty(PathBuf),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// `printf("%.9g")`: nine significant digits, trailing zeros dropped,
/// scientific notation for exponents below -4 or above 8.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| fmt_g9(*v)).collect::<Vec<_>>().join(",")
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// Rows of a delimited text file: `(1-based line, fields)`, skipping `#`
/// comments. When `header` is given the first row must match it.
fn read_rows(path: &Path, header: Option<&str>, sep: Sep) -> Result<Vec<(usize, Vec<f64>)>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header.is_some())
        .delimiter(match sep {
            Sep::Comma => b',',
            Sep::Space => b' ',
        })
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let parse_err = |row: usize, message: String| DataError::Parse { path: path.to_path_buf(), row, message };
    let csv_err = |e: csv::Error| {
        let row = e.position().map_or(0, |p| p.line() as usize);
        match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::Io { path: path.to_path_buf(), source },
            kind => parse_err(row, format!("{kind:?}")),
        }
    };
    if let Some(expected) = header {
        let found = reader.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
        if found != expected {
            return Err(parse_err(1, format!("expected header `{expected}`, found `{found}`")));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let fields = record
            .iter()
            .filter(|f| !(matches!(sep, Sep::Space) && f.is_empty()))
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(row, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if fields.is_empty() {
            continue;
        }
        if let Some(bad) = fields.iter().find(|v| !v.is_finite()) {
            return Err(parse_err(row, format!("non-finite value {bad}")));
        }
        rows.push((row, fields));
    }
    Ok(rows)
}

#[derive(Clone, Copy)]
enum Sep {
    Comma,
    Space,
}

fn expect_len(path: &Path, row: usize, fields: &[f64], n: usize) -> Result<()> {
    if fields.len() == n {
        Ok(())
    } else {
        Err(DataError::Parse { path: path.to_path_buf(), row, message: format!("expected {n} fields, found {}", fields.len()) })
    }
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> io::Result<()> {
        writeln!(w, "{IMU_HEADER}")?;
        for s in samples {
            writeln!(w, "{}", join(&[s.timestamp, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z]))?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let rows = read_rows(path, Some(IMU_HEADER), Sep::Comma)?;
    rows.into_iter()
        .map(|(row, f)| {
            expect_len(path, row, &f, 7)?;
            Ok(ImuSample { timestamp: f[0], accel: Vector3::new(f[1], f[2], f[3]), gyro: Vector3::new(f[4], f[5], f[6]) })
        })
        .collect()
}

pub fn write_scan(path: &Path, scan: &Scan) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> io::Result<()> {
        writeln!(w, "{SCAN_HEADER}")?;
        for m in &scan.points {
            writeln!(w, "{}", join(&[m.timestamp, m.range, m.bearing.x, m.bearing.y, m.bearing.z]))?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

/// Reads one scan; bearings are renormalized after parsing. An empty file
/// yields a scan with no points at `fallback_time`.
pub fn read_scan(path: &Path, fallback_time: f64) -> Result<Scan> {
    let rows = read_rows(path, Some(SCAN_HEADER), Sep::Comma)?;
    let mut points = Vec::with_capacity(rows.len());
    for (row, f) in rows {
        expect_len(path, row, &f, 5)?;
        let m = PointMeasurement::new(f[0], f[1], Vector3::new(f[2], f[3], f[4]))
            .map_err(|e| DataError::Parse { path: path.to_path_buf(), row, message: e.to_string() })?;
        points.push(m);
    }
    let timestamp = points.first().map_or(fallback_time, |m| m.timestamp);
    Ok(Scan { timestamp, points })
}

/// Converts a `x,y,z` point cloud (LiDAR frame) into a range-bearing scan.
/// Points at the origin are dropped.
pub fn read_xyz_cloud(path: &Path, timestamp: f64) -> Result<Scan> {
    let rows = read_rows(path, Some("x,y,z"), Sep::Comma)?;
    let mut points = Vec::with_capacity(rows.len());
    for (row, f) in rows {
        expect_len(path, row, &f, 3)?;
        let p = Vector3::new(f[0], f[1], f[2]);
        if p.norm() == 0.0 {
            continue;
        }
        points.push(
            PointMeasurement::from_xyz(timestamp, &p)
                .map_err(|e| DataError::Parse { path: path.to_path_buf(), row, message: e.to_string() })?,
        );
    }
    Ok(Scan { timestamp, points })
}

/// Writes a `x,y,z` point cloud, the format `read_xyz_cloud` accepts.
pub fn write_xyz(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> io::Result<()> {
        writeln!(w, "x,y,z")?;
        for p in points {
            writeln!(w, "{}", join(&[p.x, p.y, p.z]))?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn scan_file_name(index: usize) -> String {
    format!("{index:06}.csv")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumPose {
    pub timestamp: f64,
    pub pose: Pose,
}

pub fn write_tum(path: &Path, poses: &[TumPose]) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> io::Result<()> {
        for p in poses {
            let q = p.pose.rotation.to_quaternion();
            let t = p.pose.translation;
            let v = [p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w];
            writeln!(w, "{}", v.iter().map(|x| fmt_g9(*x)).collect::<Vec<_>>().join(" "))?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_tum(path: &Path) -> Result<Vec<TumPose>> {
    let rows = read_rows(path, None, Sep::Space)?;
    if rows.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    rows.into_iter()
        .map(|(row, f)| {
            expect_len(path, row, &f, 8)?;
            let q = Quaternion::new(f[7], f[4], f[5], f[6]);
            if (q.norm() - 1.0).abs() > 1e-3 {
                return Err(DataError::Parse { path: path.to_path_buf(), row, message: "quaternion is not unit".into() });
            }
            let rotation = Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q));
            Ok(TumPose { timestamp: f[0], pose: Pose { rotation, translation: Vector3::new(f[1], f[2], f[3]) } })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtectionRow {
    pub timestamp: f64,
    pub shape: Matrix3<f64>,
}

pub fn write_protection(path: &Path, rows: &[ProtectionRow]) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> io::Result<()> {
        writeln!(w, "{PROTECTION_HEADER}")?;
        for r in rows {
            let p = &r.shape;
            writeln!(w, "{}", join(&[r.timestamp, p[(0, 0)], p[(0, 1)], p[(0, 2)], p[(1, 1)], p[(1, 2)], p[(2, 2)]]))?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_protection(path: &Path) -> Result<Vec<ProtectionRow>> {
    let rows = read_rows(path, Some(PROTECTION_HEADER), Sep::Comma)?;
    rows.into_iter()
        .map(|(row, f)| {
            expect_len(path, row, &f, 7)?;
            let shape = Matrix3::new(f[1], f[2], f[3], f[2], f[4], f[5], f[3], f[5], f[6]);
            Ok(ProtectionRow { timestamp: f[0], shape })
        })
        .collect()
}

pub fn write_timing(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> io::Result<()> {
        writeln!(w, "{TIMING_HEADER}")?;
        for s in steps {
            let t = &s.timing;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_g9(s.timestamp),
                s.scan_points,
                s.selected_points,
                s.correspondences,
                s.icp_iterations,
                join(&[t.preprocess, t.icp, t.uncertainty, t.update, t.mapping, t.total].map(|x| x * 1e3))
            )?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

/// Inputs of a run, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<Scan>,
}

pub const IMU_FILE: &str = "imu.csv";
pub const SCAN_DIR: &str = "scans";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tum";

/// Writes `imu.csv`, `scans/NNNNNN.csv` and `ground_truth.tum` (truth at
/// scan times).
pub fn write_episode(dir: &Path, episode: &Episode) -> Result<()> {
    fs::create_dir_all(dir.join(SCAN_DIR)).map_err(io_err(dir))?;
    write_imu(&dir.join(IMU_FILE), &episode.imu.samples)?;
    for (i, s) in episode.scans.iter().enumerate() {
        write_scan(&dir.join(SCAN_DIR).join(scan_file_name(i)), &s.scan)?;
    }
    let gt: Vec<TumPose> =
        episode.scan_truth.iter().map(|s| TumPose { timestamp: s.timestamp, pose: s.pose() }).collect();
    write_tum(&dir.join(GROUND_TRUTH_FILE), &gt)
}

/// Reads `imu.csv` and every `scans/*.csv` in name order. Scan files hold
/// no header-level timestamp, so an empty scan takes the previous scan's time.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let imu = read_imu(&dir.join(IMU_FILE))?;
    if imu.is_empty() {
        return Err(DataError::Empty(dir.join(IMU_FILE)));
    }
    let scan_dir = dir.join(SCAN_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&scan_dir)
        .map_err(io_err(&scan_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut scans = Vec::with_capacity(files.len());
    let mut last = imu[0].timestamp;
    for f in &files {
        let s = read_scan(f, last)?;
        last = s.timestamp;
        scans.push(s);
    }
    Ok(Dataset { imu, scans })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_formatting() {
        assert_eq!(fmt_g9(0.0), "0");
        assert_eq!(fmt_g9(1.0), "1");
        assert_eq!(fmt_g9(9.81), "9.81");
        assert_eq!(fmt_g9(-0.005), "-0.005");
        assert_eq!(fmt_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_g9(123456789.0), "123456789");
        assert_eq!(fmt_g9(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_g9(0.0001), "0.0001");
        assert_eq!(fmt_g9(0.00001234), "1.234e-05");
        assert_eq!(fmt_g9(59.95), "59.95");
        assert_eq!(fmt_g9(2.0f64.sqrt()), "1.41421356");
    }

    #[test]
    fn imu_round_trip_keeps_nine_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        let s = vec![
            ImuSample { timestamp: 0.005, accel: Vector3::new(0.1, -0.2, 9.81), gyro: Vector3::new(1e-7, 0.0, -3.0) },
            ImuSample { timestamp: 0.01, accel: Vector3::new(1.0 / 3.0, 0.0, 9.8), gyro: Vector3::zeros() },
        ];
        write_imu(&path, &s).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some(IMU_HEADER));
        assert_eq!(text.lines().nth(2), Some("0.01,0.333333333,0,9.8,0,0,0"));
        let back = read_imu(&path).unwrap();
        assert_eq!(back[0], s[0]);
        assert!((back[1].accel.x - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn parse_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        fs::write(&path, format!("{IMU_HEADER}\n0,0,0,9.8,0,0,0\n0.005,0,0,x,0,0,0\n")).unwrap();
        let e = read_imu(&path).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
        fs::write(&path, format!("{IMU_HEADER}\n0,0,0,9.8,0,0\n")).unwrap();
        assert!(read_imu(&path).unwrap_err().to_string().contains("expected 7 fields"));
        fs::write(&path, "time,ax\n").unwrap();
        assert!(read_imu(&path).unwrap_err().to_string().contains("expected header"));
    }

    #[test]
    fn scan_bearings_are_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.csv");
        fs::write(&path, format!("{SCAN_HEADER}\n0.1,5,0.6,0.8,0.0000000001\n")).unwrap();
        let s = read_scan(&path, 0.0).unwrap();
        assert_eq!(s.timestamp, 0.1);
        assert!((s.points[0].bearing.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn xyz_conversion_recovers_range_and_bearing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.csv");
        fs::write(&path, "x,y,z\n3,4,0\n0,0,0\n0,0,-2\n").unwrap();
        let s = read_xyz_cloud(&path, 1.5).unwrap();
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[0].range, 5.0);
        assert!((s.points[0].bearing - Vector3::new(0.6, 0.8, 0.0)).norm() < 1e-15);
        assert!((s.points[1].point() - Vector3::new(0.0, 0.0, -2.0)).norm() < 1e-15);
    }

    #[test]
    fn tum_and_protection_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tum = dir.path().join("est.tum");
        let pose = Pose { rotation: Rotation::exp(&Vector3::new(0.1, -0.2, 0.3)), translation: Vector3::new(1.0, 2.0, -3.0) };
        write_tum(&tum, &[TumPose { timestamp: 0.1, pose }]).unwrap();
        let back = read_tum(&tum).unwrap();
        assert!((back[0].pose.translation - pose.translation).norm() < 1e-12);
        assert!(back[0].pose.rotation.angle_to(&pose.rotation) < 1e-8);

        let prot = dir.path().join("protection.csv");
        let shape = Matrix3::new(4.0, 0.5, 0.25, 0.5, 3.0, -0.125, 0.25, -0.125, 2.0);
        write_protection(&prot, &[ProtectionRow { timestamp: 0.1, shape }]).unwrap();
        assert_eq!(fs::read_to_string(&prot).unwrap(), format!("{PROTECTION_HEADER}\n0.1,4,0.5,0.25,3,-0.125,2\n"));
        assert_eq!(read_protection(&prot).unwrap()[0].shape, shape);
    }
}
