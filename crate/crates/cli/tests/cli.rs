use std::path::Path;
use std::process::{Command, Output};

use geonlf_cli::commands::frame_name;
use geonlf_cli::io;
use geonlf_core::geometry::translation;
use geonlf_core::metrics::pose_metrics;

const SMALL: &str = "scanner.height=8\nscanner.width=60\n";

fn geonlf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geonlf")).args(args).env("RUST_LOG", "warn").output().expect("spawn geonlf")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn gen(dir: &Path, extra: &[&str]) {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    let mut args = vec!["gen", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(&geonlf(&args));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_expected_files_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), &["--seed", "3"]);
    gen(b.path(), &["--seed", "3"]);
    let mut names: Vec<String> = std::fs::read_dir(a.path().join("data")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".rimg")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.ends_with(".ply")).count(), 8);
    for f in ["gt_traj.txt", "init_traj.txt", "holdout.txt", "config.txt"] {
        assert!(names.contains(&f.to_string()), "{f}");
    }
    for n in &names {
        let x = std::fs::read(a.path().join("data").join(n)).unwrap();
        let y = std::fs::read(b.path().join("data").join(n)).unwrap();
        assert_eq!(x, y, "{n} differs between identical runs");
    }
    assert_eq!(std::fs::read_to_string(a.path().join("data/holdout.txt")).unwrap().trim(), "7");
}

#[test]
fn register_without_steps_returns_init() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &["--holdout-count", "0"]);
    let cfg = d.path().join("reg.cfg");
    std::fs::write(&cfg, "register.steps=0\n").unwrap();
    let out = d.path().join("reg");
    ok(&geonlf(&["register", s(&d.path().join("data")), "--config", s(&cfg), "--out", s(&out)]));
    assert_eq!(
        io::read_trajectory(&out.join("est_traj.txt")).unwrap(),
        io::read_trajectory(&d.path().join("data/init_traj.txt")).unwrap()
    );
}

#[test]
fn register_beats_icp_on_low_overlap() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("small.cfg");
    std::fs::write(&cfg, "scanner.height=16\nscanner.width=180\n").unwrap();
    let data = d.path().join("data");
    ok(&geonlf(&["gen", "--preset", "low_overlap", "--holdout-count", "0", "--config", s(&cfg), "--out", s(&data)]));
    let reg = d.path().join("reg");
    let icp = d.path().join("icp");
    ok(&geonlf(&["register", s(&data), "--out", s(&reg)]));
    ok(&geonlf(&["baseline-icp", s(&data), "--out", s(&icp)]));
    let gt = io::read_trajectory(&data.join("gt_traj.txt")).unwrap();
    let ate = |p: &Path| pose_metrics(&io::read_trajectory(&p.join("est_traj.txt")).unwrap(), &gt).unwrap().ate;
    let (a_reg, a_icp) = (ate(&reg), ate(&icp));
    assert!(a_reg < a_icp, "register {a_reg} vs icp {a_icp}");
    let losses = std::fs::read_to_string(reg.join("losses.csv")).unwrap();
    assert!(losses.starts_with("iter,phase,total,depth,intensity,raydrop,cd,normal,alpha,t_temp\n"));
}

#[test]
fn eval_matches_library_and_zero_on_identity() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let data = d.path().join("data");
    let (gt, init) = (data.join("gt_traj.txt"), data.join("init_traj.txt"));
    let out = d.path().join("eval");
    let res = geonlf(&["eval", "--est", s(&gt), "--ref", s(&gt), "--out", s(&out)]);
    ok(&res);
    let text = String::from_utf8(res.stdout).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(row[..3].iter().all(|v| v.abs() < 1e-9), "{text}");

    let res = geonlf(&["eval", "--est", s(&init), "--ref", s(&gt), "--out", s(&out)]);
    ok(&res);
    let text = String::from_utf8(res.stdout).unwrap();
    let lib = pose_metrics(&io::read_trajectory(&init).unwrap(), &io::read_trajectory(&gt).unwrap()).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(&row[..3], &[lib.ate, lib.rpe_t, lib.rpe_r]);
    assert_eq!(text.lines().next().unwrap(), io::METRICS_HEADER);
    assert!(text.lines().nth(2).unwrap().starts_with("mean,"));

    // scans against themselves: perfect image metrics
    let res = geonlf(&["eval", "--est", s(&gt), "--ref", s(&gt), "--pred-scans", s(&data), "--gt-scans", s(&data), "--out", s(&out)]);
    ok(&res);
    let text = String::from_utf8(res.stdout).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[3], 0.0);
    assert_eq!(row[4], 1.0);
    assert_eq!(row[7], 99.0);
}

#[test]
fn plot_has_one_polyline_per_trajectory() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let data = d.path().join("data");
    let out = d.path().join("plot");
    let (gt, init) = (data.join("gt_traj.txt"), data.join("init_traj.txt"));
    ok(&geonlf(&["plot", s(&gt), s(&init), s(&gt), "--out", s(&out)]));
    let svg = std::fs::read_to_string(out.join("plot.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert!(svg.contains(">gt_traj<") && svg.contains(">init_traj<"));
}

#[test]
fn malformed_config_exits_1_with_line() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let cfg = d.path().join("bad.cfg");
    std::fs::write(&cfg, "register.steps=3\nnot.a.key=1\n").unwrap();
    let res = geonlf(&["register", s(&d.path().join("data")), "--config", s(&cfg), "--out", s(&d.path().join("o"))]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 2"), "{err}");
    let res = geonlf(&["register", s(&d.path().join("missing")), "--out", s(&d.path().join("o"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("init_traj.txt"));
}

#[test]
fn diverging_training_exits_2() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &["--holdout-count", "0"]);
    let cfg = d.path().join("boom.cfg");
    std::fs::write(&cfg, "train.iterations=20\ntrain.rays_per_batch=16\ntrain.num_samples=16\ntrain.lr_field_start=1e306\ntrain.lr_field_end=1e306\n").unwrap();
    let out = d.path().join("o");
    let res = geonlf(&["reconstruct", s(&d.path().join("data")), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("non-finite"));
    assert!(out.join("losses.csv").exists());
}

#[test]
fn reconstruct_from_exact_poses_stays_put() {
    let d = tempfile::tempdir().unwrap();
    let scan = d.path().join("scan.cfg");
    std::fs::write(&scan, "scanner.height=16\nscanner.width=180\n").unwrap();
    let data = d.path().join("data");
    ok(&geonlf(&["gen", "--sigma-rot", "0", "--sigma-trans", "0", "--config", s(&scan), "--out", s(&data)]));
    let cfg = d.path().join("short.cfg");
    std::fs::write(&cfg, "train.iterations=80\ntrain.rays_per_batch=64\ntrain.num_samples=32\ntrain.cd_points=256\ntrain.top_k=2\n").unwrap();
    let out = d.path().join("o");
    ok(&geonlf(&["reconstruct", s(&data), "--config", s(&cfg), "--out", s(&out), "--render"]));
    let est = io::read_trajectory(&out.join("est_traj.txt")).unwrap();
    let gt = io::read_trajectory(&data.join("gt_traj.txt")).unwrap();
    for (id, m) in est.frames() {
        let g = gt.pose(*id).unwrap();
        let e = (translation(m) - translation(g)).norm();
        assert!(e < 1e-2, "frame {id}: {e}");
    }
    assert!(pose_metrics(&est, &gt.restrict_to(&est.ids())).unwrap().ate < 5e-3);
    let (_, params) = io::read_checkpoint(&out.join("field.gnlf")).unwrap();
    assert!(!params.is_empty());
    // training frames and the held-out frame are rendered
    for id in 0..8 {
        assert!(out.join("pred").join(frame_name(id, "rimg")).exists(), "frame {id}");
    }
    assert!(out.join("novel_traj.txt").exists());
}
