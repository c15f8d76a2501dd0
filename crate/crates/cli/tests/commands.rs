use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ubb_lio::dataset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ubb-lio"))
}

fn short_config(dir: &Path, duration: f64, extra: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    fs::write(&path, format!("[sim]\nduration = {duration}\nseed = 5\n{extra}\n[output]\ndir = \"{}\"\n", dir.display()))
        .unwrap();
    path
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    for e in walk(dir) {
        files.push((e.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&e).unwrap()));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() { out.extend(walk(&p)) } else { out.push(p) }
    }
    out
}

#[test]
fn simulate_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), 10.0, "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let st = bin().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(out).status().unwrap();
        assert!(st.success());
    }
    let imu = fs::read_to_string(a.join("imu.csv")).unwrap();
    assert_eq!(imu.lines().next().unwrap(), "t,ax,ay,az,gx,gy,gz");
    assert_eq!(imu.lines().count() - 1, 2000);
    assert_eq!(fs::read_dir(a.join("scans")).unwrap().count(), 100);
    assert!(a.join("scans/000099.csv").is_file());
    assert_eq!(read_all(&a), read_all(&b));
}

#[test]
fn round_trip_simulate_run_eval_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_config(tmp.path(), 12.0, "");
    let data = tmp.path().join("dataset");
    assert!(bin().args(["simulate", "--config"]).arg(&cfg).status().unwrap().success());
    assert!(data.join("ground_truth.tum").is_file());

    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["est.tum", "protection.csv", "protection_local.csv", "map.xyz", "timing.csv"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let prot = fs::read_to_string(tmp.path().join("protection.csv")).unwrap();
    assert_eq!(prot.lines().next().unwrap(), "t,p11,p12,p13,p22,p23,p33");

    let out = bin()
        .arg("eval")
        .arg("--est")
        .arg(tmp.path().join("est.tum"))
        .arg("--protection")
        .arg(tmp.path().join("protection.csv"))
        .arg("--gt")
        .arg(data.join("ground_truth.tum"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("cr_percent = 100.000"), "{text}");
    assert!(text.lines().last().unwrap().starts_with("| ubb-lio | 100.000 / "));

    let plots = tmp.path().join("plots");
    let st = bin()
        .arg("plot")
        .arg("--est")
        .arg(tmp.path().join("est.tum"))
        .arg("--protection")
        .arg(tmp.path().join("protection.csv"))
        .arg("--gt")
        .arg(data.join("ground_truth.tum"))
        .arg("--out")
        .arg(&plots)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(fs::read_dir(&plots).unwrap().count(), 4);
    for f in ["x.svg", "y.svg", "z.svg", "trajectory.svg"] {
        let s = fs::read_to_string(plots.join(f)).unwrap();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }
}

#[test]
fn eval_identical_trajectory_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.tum");
    fs::write(&gt, "0 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n0.2 2 1 0 0 0 0 1\n").unwrap();
    let prot = tmp.path().join("p.csv");
    fs::write(&prot, "t,p11,p12,p13,p22,p23,p33\n0,1,0,0,1,0,1\n0.1,1,0,0,1,0,1\n0.2,1,0,0,1,0,1\n").unwrap();
    let out = bin().arg("eval").arg("--est").arg(&gt).arg("--protection").arg(&prot).arg("--gt").arg(&gt).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("cr_percent = 100.000"));
    assert!(text.contains("ate_m = 0.000000"));
    assert!(text.contains("ail_m = 2.000000"));
    assert_eq!(text.lines().last().unwrap(), "| ubb-lio | 100.000 / 2.000 | 0.000 |");
}

#[test]
fn missing_gt_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let est = tmp.path().join("est.tum");
    fs::write(&est, "0 0 0 0 0 0 0 1\n").unwrap();
    let prot = tmp.path().join("p.csv");
    fs::write(&prot, "t,p11,p12,p13,p22,p23,p33\n0,1,0,0,1,0,1\n").unwrap();
    let missing = tmp.path().join("nowhere.tum");
    let out = bin().arg("eval").arg("--est").arg(&est).arg("--protection").arg(&prot).arg("--gt").arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing.display().to_string()));
}

#[test]
fn plot_reports_malformed_row() {
    let tmp = tempfile::tempdir().unwrap();
    let est = tmp.path().join("est.tum");
    fs::write(&est, "0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n").unwrap();
    let prot = tmp.path().join("p.csv");
    fs::write(&prot, "t,p11,p12,p13,p22,p23,p33\n0,1,0,0,1,0,1\n0.1,1,0,zero,1,0,1\n").unwrap();
    let out = bin()
        .arg("plot")
        .arg("--est")
        .arg(&est)
        .arg("--protection")
        .arg(&prot)
        .arg("--gt")
        .arg(&est)
        .arg("--out")
        .arg(tmp.path().join("plots"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3"), "{err}");
}

#[test]
fn plot_golden_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let est = tmp.path().join("est.tum");
    fs::write(&est, "0 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n0.2 2 0 0 0 0 0 1\n").unwrap();
    let gt = tmp.path().join("gt.tum");
    fs::write(&gt, "0 0.1 0 0 0 0 0 1\n0.1 1.1 0 0 0 0 0 1\n0.2 2.1 0 0 0 0 0 1\n").unwrap();
    let prot = tmp.path().join("p.csv");
    fs::write(&prot, "t,p11,p12,p13,p22,p23,p33\n0,0.04,0,0,0.04,0,0.04\n0.1,0.04,0,0,0.04,0,0.04\n0.2,0.04,0,0,0.04,0,0.04\n").unwrap();
    let plots = tmp.path().join("plots");
    let written = ubb_lio_cli::plot(&est, &prot, &gt, &plots, 0.01).unwrap();
    assert_eq!(written.len(), 4);
    let x = fs::read_to_string(plots.join("x.svg")).unwrap();
    assert_eq!(
        x.lines().next().unwrap(),
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="300" viewBox="0 0 800 300">"#
    );
    // Envelope ±0.2, error 0.1: the y range is ±0.21 mapped onto rows
    // 250..33.33, centre 141.67, so the error sits 108.33·0.1/0.21 above it.
    let err_line = x.lines().filter(|l| l.starts_with("<polyline")).nth(2).unwrap();
    assert!(err_line.contains("points=\"50.00,90.08 412.50,90.08 775.00,90.08\""), "{err_line}");
    let top = x.lines().find(|l| l.starts_with("<polyline")).unwrap();
    assert!(top.contains("points=\"50.00,38.49 412.50,38.49 775.00,38.49\""), "{top}");
    let traj = fs::read_to_string(plots.join("trajectory.svg")).unwrap();
    assert!(traj.starts_with(r#"<svg xmlns="http://www.w3.org/2000/svg" width="600" height="600" viewBox="0 0 600 600">"#));
}

#[test]
fn bad_config_exits_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[lidar]\nb_r = -1.0\n").unwrap();
    let out = bin().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("d")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("b_r"), "{err}");

    fs::write(&cfg, "[map]\nvoxel_size = 0.5\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--data").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("run").arg("--data").arg(tmp.path().join("none")).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("imu.csv"));
}

#[test]
fn strict_policy_inconsistency_exits_4() {
    // Data simulated with large noise but run with bounds far too tight:
    // observations end up disjoint from the predicted sets.
    let tmp = tempfile::tempdir().unwrap();
    let sim_cfg = short_config(tmp.path(), 6.0, "b_r = 0.2\nnoise_mode = \"adversarial\"");
    let data = tmp.path().join("dataset");
    assert!(bin().args(["simulate", "--config"]).arg(&sim_cfg).status().unwrap().success());
    let run_cfg = tmp.path().join("run.toml");
    fs::write(
        &run_cfg,
        "[lidar]\nb_r = 0.0001\nb_phi_deg = 0.0001\n[icp]\np_nl = 1e-14\n[filter]\ndisjoint_policy = \"strict\"\ninitial_velocity_radius = 1e-6\ninitial_attitude_radius = 1e-6\n",
    )
    .unwrap();
    let out = bin().arg("run").arg("--config").arg(&run_cfg).arg("--data").arg(&data).arg("--out").arg(tmp.path().join("r")).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn convert_xyz_cloud() {
    let tmp = tempfile::tempdir().unwrap();
    let xyz = tmp.path().join("c.csv");
    fs::write(&xyz, "x,y,z\n1,0,0\n0,2,0\n0,0,0\n").unwrap();
    let out_path = tmp.path().join("scan.csv");
    let st = bin().arg("convert").arg("--xyz").arg(&xyz).args(["--time", "1.5"]).arg("--out").arg(&out_path).status().unwrap();
    assert!(st.success());
    let scan = dataset::read_scan(&out_path, 0.0).unwrap();
    assert_eq!(scan.points.len(), 2);
    assert_eq!(scan.timestamp, 1.5);
}
