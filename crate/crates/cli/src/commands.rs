//! Subcommand bodies. Each takes parsed arguments and returns a typed
//! result, so the binary only maps errors to exit codes.

use std::path::{Path, PathBuf};

use geonlf_core::field::{FieldParams, RenderOptions};
use geonlf_core::geo::{build_graph, geo_optimize, sequential_icp, temperature_at, GeoError};
use geonlf_core::geometry::{Se3Param, Trajectory};
use geonlf_core::metrics::{chamfer_fscore, image_metrics, pose_metrics, ErrorStats, ImageMetrics, MetricsError, MetricsRow};
use geonlf_core::range_image::unproject;
use geonlf_core::scene::{lidar_scan, make_scene, perturb_poses, preset_scanner, preset_trajectory, Preset, SceneError};
use geonlf_core::trainer::{register_novel_view, render_range_image, LossRow, NovelViewConfig, Phase, TrainConfig, TrainError, Trainer};
use geonlf_core::{PointCloud, RangeImage};
use log::info;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::io::{self, IoError, PlyFormat};
use crate::plot::trajectory_svg;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// 2 for a diverged optimization, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::NonFiniteLoss { .. }) => 2,
            _ => 1,
        }
    }
}

pub fn frame_name(id: u32, ext: &str) -> String {
    format!("frame_{id:04}.{ext}")
}

/// Held-out ids `stride, 2 stride, ...` (`count` of them), each clamped to
/// the last frame; duplicates collapse.
pub fn holdout_ids(frames: usize, stride: usize, count: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = Vec::new();
    if frames == 0 || stride == 0 {
        return ids;
    }
    for k in 1..=count {
        let id = (k * stride).min(frames - 1) as u32;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids
}

/// Loads `data/config.txt` (if present), then the user's config on top.
pub fn load_config(data_dir: Option<&Path>, user: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut layer = |p: &Path| -> Result<(), CliError> {
        let text = io::read_text(p)?;
        cfg.apply(&text).map_err(|source| CliError::Config { path: p.to_path_buf(), source })
    };
    if let Some(d) = data_dir {
        let p = d.join("config.txt");
        if p.exists() {
            layer(&p)?;
        }
    }
    if let Some(u) = user {
        layer(u)?;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::Io { path: dir.to_path_buf(), source: e }.into())
}

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub preset: Preset,
    pub seed: u64,
    pub frames: usize,
    pub sigma_rot_deg: f64,
    pub sigma_trans: f64,
    pub holdout_stride: usize,
    pub holdout_count: usize,
}

/// Writes a synthetic sequence: per-frame scans, both trajectories, the
/// held-out list and the scanner settings.
pub fn gen(args: &GenArgs, user_config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut cfg = RunConfig { scanner: preset_scanner(args.preset), train: TrainConfig::for_preset(args.preset), ..RunConfig::default() };
    if let Some(p) = user_config {
        cfg.apply(&io::read_text(p)?).map_err(|source| CliError::Config { path: p.to_path_buf(), source })?;
    }
    cfg.scanner.validate().map_err(CliError::Invalid)?;
    if !(args.sigma_rot_deg >= 0.0 && args.sigma_trans >= 0.0) {
        return Err(CliError::Invalid("noise sigmas must be >= 0".into()));
    }
    ensure_dir(out)?;
    let scene = make_scene(args.preset, args.seed);
    let gt = preset_trajectory(args.preset, args.frames, args.seed)?;
    for (id, pose) in gt.frames() {
        let (img, cloud) = lidar_scan(&scene, pose, &cfg.scanner, args.seed.wrapping_mul(1000).wrapping_add(*id as u64));
        io::write_rimg(&out.join(frame_name(*id, "rimg")), &img)?;
        io::write_ply(&out.join(frame_name(*id, "ply")), &cloud, PlyFormat::Ascii)?;
    }
    let init = perturb_poses(&gt, args.sigma_rot_deg, args.sigma_trans, args.seed);
    io::write_trajectory(&out.join("gt_traj.txt"), &gt)?;
    io::write_trajectory(&out.join("init_traj.txt"), &init)?;
    let hold: Vec<String> = holdout_ids(args.frames, args.holdout_stride, args.holdout_count).iter().map(|i| i.to_string()).collect();
    io::write_text(&out.join("holdout.txt"), format!("{}\n", hold.join("\n")).trim_start())?;
    io::write_text(&out.join("config.txt"), &cfg.to_string())?;
    info!("wrote {} frames of {} to {}", args.frames, args.preset.name(), out.display());
    Ok(())
}

/// A sequence from `gen`, split into training and held-out frames.
pub struct Dataset {
    pub init: Trajectory,
    pub gt: Option<Trajectory>,
    pub holdout: Vec<u32>,
    pub train_ids: Vec<u32>,
    pub images: Vec<RangeImage>,
}

pub fn read_holdout(dir: &Path) -> Result<Vec<u32>, CliError> {
    let p = dir.join("holdout.txt");
    if !p.exists() {
        return Ok(Vec::new());
    }
    io::read_text(&p)?
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| IoError::Format { path: p.clone(), msg: format!("bad frame id '{t}'") }.into()))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let init = io::read_trajectory(&dir.join("init_traj.txt"))?;
    let gt_path = dir.join("gt_traj.txt");
    let gt = if gt_path.exists() { Some(io::read_trajectory(&gt_path)?) } else { None };
    let holdout = read_holdout(dir)?;
    let train_ids: Vec<u32> = init.ids().into_iter().filter(|i| !holdout.contains(i)).collect();
    let images = train_ids.iter().map(|id| io::read_rimg(&dir.join(frame_name(*id, "rimg")))).collect::<Result<_, _>>()?;
    Ok(Dataset { init: init.restrict_to(&train_ids), gt, holdout, train_ids, images })
}

fn geo_loss_rows(losses: &[f64], cfg: &RunConfig) -> Vec<LossRow> {
    let steps = losses.len().max(1) as f64;
    losses
        .iter()
        .enumerate()
        .map(|(k, &l)| LossRow {
            iter: k,
            phase: Phase::Geometric,
            total: l,
            depth: 0.0,
            intensity: 0.0,
            raydrop: 0.0,
            cd: 0.0,
            normal: 0.0,
            alpha: 0.0,
            temperature: temperature_at(k as f64 / steps, &cfg.train.rcd),
        })
        .collect()
}

fn clouds_of(ds: &Dataset, cfg: &RunConfig) -> Vec<PointCloud> {
    ds.images.iter().map(|img| unproject(img, &cfg.scanner)).collect()
}

/// Pure geometric registration of the training frames.
pub fn register(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Trajectory, CliError> {
    let ds = load_dataset(data)?;
    ensure_dir(out)?;
    let est = if cfg.register.steps == 0 {
        io::write_text(&out.join("losses.csv"), &io::loss_csv(&[]))?;
        ds.init.clone()
    } else {
        let clouds = clouds_of(&ds, cfg);
        let graph = build_graph(clouds.len(), cfg.register.window)?;
        let poses: Vec<Se3Param> = ds.init.poses().iter().map(Se3Param::from_matrix).collect();
        let run = geo_optimize(&clouds, &poses, &graph, &cfg.train.rcd, cfg.register.steps, cfg.register.lr_rot, cfg.register.lr_trans)?;
        io::write_text(&out.join("losses.csv"), &io::loss_csv(&geo_loss_rows(&run.losses, cfg)))?;
        Trajectory::new(ds.train_ids.iter().copied().zip(run.poses.iter().map(|p| p.matrix())).collect())
            .map_err(|e| CliError::Invalid(e.to_string()))?
    };
    io::write_trajectory(&out.join("est_traj.txt"), &est)?;
    Ok(est)
}

/// Sequential pairwise ICP over the training frames.
pub fn baseline_icp(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Trajectory, CliError> {
    let ds = load_dataset(data)?;
    ensure_dir(out)?;
    let poses = sequential_icp(&clouds_of(&ds, cfg), &ds.init.poses(), cfg.icp.max_iters, cfg.icp.tol)?;
    let est = Trajectory::new(ds.train_ids.iter().copied().zip(poses).collect()).map_err(|e| CliError::Invalid(e.to_string()))?;
    io::write_trajectory(&out.join("est_traj.txt"), &est)?;
    Ok(est)
}

fn render_opts(cfg: &RunConfig) -> RenderOptions {
    RenderOptions { num_samples: cfg.train.num_samples, alpha: None, early_stop: cfg.train.early_stop }
}

/// Full training; with `render`, also writes rendered range images of the
/// training frames and registers and renders the held-out frames.
pub fn reconstruct(cfg: &RunConfig, data: &Path, out: &Path, render: bool) -> Result<Trajectory, CliError> {
    let ds = load_dataset(data)?;
    ensure_dir(out)?;
    let mut trainer = Trainer::new(ds.images.clone(), cfg.scanner.clone(), &ds.init, cfg.train.clone())?;
    let result = trainer.run();
    io::write_text(&out.join("losses.csv"), &io::loss_csv(trainer.log()))?;
    result?;
    let t_far = trainer.t_far();
    let output = trainer.finish();
    io::write_trajectory(&out.join("est_traj.txt"), &output.trajectory)?;
    io::write_checkpoint(&out.join("field.gnlf"), &output.field, &cfg.to_string())?;
    if render {
        let pred = out.join("pred");
        ensure_dir(&pred)?;
        let opts = render_opts(cfg);
        for (id, pose) in output.trajectory.frames() {
            let img = render_range_image(&output.field, pose, &cfg.scanner, &opts, cfg.train.t_near, t_far);
            io::write_rimg(&pred.join(frame_name(*id, "rimg")), &img)?;
        }
        let novel = register_holdout(cfg, data, &ds, &output.field, &output.trajectory, t_far)?;
        for (id, pose) in novel.frames() {
            let img = render_range_image(&output.field, pose, &cfg.scanner, &opts, cfg.train.t_near, t_far);
            io::write_rimg(&pred.join(frame_name(*id, "rimg")), &img)?;
        }
        if !novel.is_empty() {
            io::write_trajectory(&out.join("novel_traj.txt"), &novel)?;
        }
    }
    Ok(output.trajectory)
}

/// Poses of held-out frames, each started from the nearest training frame's
/// estimated pose.
fn register_holdout(cfg: &RunConfig, data: &Path, ds: &Dataset, field: &FieldParams, est: &Trajectory, t_far: f64) -> Result<Trajectory, CliError> {
    let mut frames = Vec::new();
    let nv = NovelViewConfig {
        num_samples: cfg.train.num_samples,
        t_near: cfg.train.t_near,
        t_far,
        seed: cfg.train.seed,
        ..NovelViewConfig::default()
    };
    for &id in &ds.holdout {
        let target = io::read_rimg(&data.join(frame_name(id, "rimg")))?;
        let nearest = *ds.train_ids.iter().min_by_key(|t| (**t as i64 - id as i64).abs()).ok_or_else(|| CliError::Invalid("no training frames".into()))?;
        let init = Se3Param::from_matrix(est.pose(nearest).expect("training id"));
        let res = register_novel_view(field, &target, &cfg.scanner, &init, &nv)?;
        frames.push((id, res.pose.matrix()));
    }
    Trajectory::new(frames).map_err(|e| CliError::Invalid(e.to_string()))
}

pub struct EvalInputs<'a> {
    pub est: &'a Path,
    pub reference: &'a Path,
    pub pred_scans: Option<&'a Path>,
    pub gt_scans: Option<&'a Path>,
    pub fscore_threshold: f64,
}

/// Pose metrics over the frames both trajectories share; scan metrics are
/// averaged over frames present in both scan directories and are NaN when
/// no scans are given.
pub fn eval(cfg: &RunConfig, inp: &EvalInputs) -> Result<MetricsRow, CliError> {
    let est = io::read_trajectory(inp.est)?;
    let reference = io::read_trajectory(inp.reference)?.restrict_to(&est.ids());
    let pose = pose_metrics(&est, &reference)?;
    let nan = ErrorStats { rmse: f64::NAN, medae: f64::NAN, psnr: f64::NAN };
    let mut row = MetricsRow {
        seq: inp.est.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        pose,
        cd: f64::NAN,
        fscore: f64::NAN,
        image: ImageMetrics { depth: nan, intensity: nan, drop_accuracy: f64::NAN },
    };
    if let (Some(pd), Some(gd)) = (inp.pred_scans, inp.gt_scans) {
        let mut rows = Vec::new();
        for id in est.ids() {
            let (pp, gp) = (pd.join(frame_name(id, "rimg")), gd.join(frame_name(id, "rimg")));
            if !pp.exists() || !gp.exists() {
                continue;
            }
            let (pred, gt) = (io::read_rimg(&pp)?, io::read_rimg(&gp)?);
            let image = image_metrics(&pred, &gt)?;
            let (pc, gc) = (unproject(&pred, &cfg.scanner), unproject(&gt, &cfg.scanner));
            let (cd, fscore) = if pc.is_empty() || gc.is_empty() { (f64::NAN, 0.0) } else { chamfer_fscore(&pc, &gc, inp.fscore_threshold)? };
            rows.push(MetricsRow { seq: String::new(), pose, cd, fscore, image });
        }
        if rows.is_empty() {
            return Err(CliError::Invalid("no frame has both a predicted and a ground-truth scan".into()));
        }
        let mean = MetricsRow::mean(&rows);
        row.cd = mean.cd;
        row.fscore = mean.fscore;
        row.image = mean.image;
    }
    Ok(row)
}

pub fn plot(trajs: &[PathBuf]) -> Result<String, CliError> {
    let named = trajs
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            io::read_trajectory(p).map(|t| (name, t))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(trajectory_svg(&named))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_rule() {
        assert_eq!(holdout_ids(36, 9, 4), vec![9, 18, 27, 35]);
        assert_eq!(holdout_ids(8, 9, 4), vec![7]);
        assert!(holdout_ids(8, 9, 0).is_empty());
        assert_eq!(holdout_ids(20, 5, 2), vec![5, 10]);
    }
}
