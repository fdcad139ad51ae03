//! The pose-free training loop: ray-batch optimization of the field and
//! poses, alternated with pure geometric optimization of the frame graph.

pub mod losses;
pub mod novel;
pub mod schedule;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{backward, pose_gradient, render_ray, FieldConfig, FieldError, FieldGrad, FieldParams, Ray, RenderOptions, RenderOutput, Upstream};
use crate::geo::{build_graph, geo_step, temperature_at, GeoError, GeoProblem, PoseOptimizer, RcdConfig};
use crate::geometry::{Se3Param, Trajectory, Vec3, Vec6};
use crate::optim::{AdamState, LrSchedule};
use crate::range_image::{unproject, RangeImage, ScannerConfig};
use crate::scene::Preset;
use crate::spatial::estimate_normals;
pub use losses::{cd_loss_3d, normal_loss, render_loss, LossWeights, PixelTarget, RayPrediction, RenderLoss};
pub use novel::{register_novel_view, render_range_image, NovelViewConfig, NovelViewResult};
pub use schedule::{alternation_ratio, c2f_alpha, reweight_factor, select_outliers, FrameLossTracker};

/// Rays per parallel work unit; fixed so reductions do not depend on the
/// thread count.
const CHUNK: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("empty ray batch")]
    EmptyBatch,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}, frame {frame}: {terms}")]
    NonFiniteLoss { iteration: usize, frame: usize, terms: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub num_samples: usize,
    pub t_near: f64,
    /// Rays march to `max_range * far_margin`.
    pub far_margin: f64,
    pub early_stop: f64,
    pub stratified: bool,
    pub lr_field: LrSchedule,
    pub lr_trans: LrSchedule,
    pub lr_rot: LrSchedule,
    pub weights: LossWeights,
    pub top_k: usize,
    pub w0_start: f64,
    pub w0_end: f64,
    pub c2f_start: f64,
    pub c2f_end: f64,
    pub alt_ratio_start: f64,
    pub alt_ratio_end: f64,
    pub m1: usize,
    /// Multiplier on both pose learning rates during the geometric phase.
    pub geo_lr_scale: f64,
    pub graph_window: usize,
    pub cd_every: usize,
    pub cd_points: usize,
    pub normal_k: usize,
    pub rcd: RcdConfig,
    pub selective_reweighting: bool,
    pub geometric_phase: bool,
    /// Let the geometric phase reuse the global phase's pose Adam moments.
    pub shared_pose_state: bool,
    pub field: FieldConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_batch: 256,
            num_samples: 64,
            t_near: 0.01,
            far_margin: 1.05,
            early_stop: 1e-4,
            stratified: true,
            lr_field: LrSchedule::new(1e-2, 1e-4),
            lr_trans: LrSchedule::new(1e-3, 1e-5),
            lr_rot: LrSchedule::new(5e-3, 5e-5),
            weights: LossWeights::default(),
            top_k: 5,
            w0_start: 0.15,
            w0_end: 1.0,
            c2f_start: 0.1,
            c2f_end: 0.8,
            alt_ratio_start: 10.0,
            alt_ratio_end: 1.0,
            m1: 1,
            geo_lr_scale: 10.0,
            graph_window: 2,
            cd_every: 10,
            cd_points: 2048,
            normal_k: 8,
            rcd: RcdConfig::default(),
            selective_reweighting: true,
            geometric_phase: true,
            shared_pose_state: false,
            field: FieldConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned per scene preset. The sparse scans of `low_overlap`
    /// collapse onto each other under large geometric steps while the
    /// correspondence weights are still near uniform, so that preset keeps the
    /// geometric phase at the global pose rates.
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::LowOverlap => Self { geo_lr_scale: 1.0, ..Self::default() },
            Preset::Corridor | Preset::Intersection => Self::default(),
        }
    }

    pub fn validate(&self, num_frames: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, s) in [("lr_field", self.lr_field), ("lr_trans", self.lr_trans), ("lr_rot", self.lr_rot)] {
            if !(s.start > 0.0 && s.end > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0 <= self.c2f_start && self.c2f_start < self.c2f_end && self.c2f_end <= 1.0) {
            return bad("need 0 <= c2f_start < c2f_end <= 1".into());
        }
        if self.top_k >= num_frames {
            return bad(format!("top_k {} must be below the frame count {num_frames}", self.top_k));
        }
        if self.rays_per_batch == 0 || self.num_samples == 0 {
            return bad("rays_per_batch and num_samples must be >= 1".into());
        }
        if !(self.geo_lr_scale > 0.0) {
            return bad("geo_lr_scale must be positive".into());
        }
        if self.m1 == 0 {
            return bad("m1 must be >= 1".into());
        }
        if !(self.w0_start > 0.0 && self.w0_start <= 1.0) {
            return bad("w0_start must lie in (0, 1]".into());
        }
        if !(self.t_near >= 0.0 && self.far_margin > 0.0) {
            return bad("t_near must be >= 0 and far_margin > 0".into());
        }
        self.rcd.validate()?;
        self.field.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Global,
    Geometric,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Global => "global",
            Phase::Geometric => "geo",
        }
    }
}

/// One loss-log row. Global rows carry unweighted components and their
/// weighted total; geometric rows carry the graph loss in `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub phase: Phase,
    pub total: f64,
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub cd: f64,
    pub normal: f64,
    pub alpha: f64,
    pub temperature: f64,
}

/// Pixels and sampling offsets for one frame's iteration.
#[derive(Debug, Clone)]
pub struct Batch {
    pub frame: usize,
    pub pixels: Vec<usize>,
    pub jitter: Option<Vec<Vec<f64>>>,
    /// Valid pixels used for the 3D constraints, if computed this iteration.
    pub geometry: Option<Vec<usize>>,
}

/// Gradients of one iteration.
#[derive(Debug, Clone)]
pub struct IterationGradients {
    pub field: Vec<f64>,
    pub pose: Vec6,
    pub render: RenderLoss,
    pub cd: f64,
    pub normal: f64,
    pub total: f64,
    pub field_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub field: FieldParams,
    pub trajectory: Trajectory,
    pub log: Vec<LossRow>,
}

pub struct Trainer {
    cfg: TrainConfig,
    scanner: ScannerConfig,
    images: Vec<RangeImage>,
    ids: Vec<u32>,
    valid: Vec<Vec<usize>>,
    /// Per-pixel observed normals (sensor frame), zero where invalid.
    normals: Vec<Vec<Vec3>>,
    field: FieldParams,
    field_adam: AdamState,
    poses: Vec<Se3Param>,
    pose_opt: PoseOptimizer,
    geo_opt: PoseOptimizer,
    geo: Option<GeoProblem>,
    tracker: FrameLossTracker,
    outliers: Vec<usize>,
    rng: ChaCha8Rng,
    iter: usize,
    log: Vec<LossRow>,
}

impl Trainer {
    pub fn new(images: Vec<RangeImage>, scanner: ScannerConfig, init: &Trajectory, cfg: TrainConfig) -> Result<Self, TrainError> {
        let m = images.len();
        if m < 3 {
            return Err(TrainError::InvalidConfig(format!("training needs at least 3 frames, got {m}")));
        }
        if init.len() != m {
            return Err(TrainError::InvalidConfig(format!("{} initial poses for {m} frames", init.len())));
        }
        cfg.validate(m)?;
        scanner.validate().map_err(TrainError::InvalidConfig)?;
        for img in &images {
            if img.height != scanner.height || img.width != scanner.width {
                return Err(TrainError::InvalidConfig("range image shape differs from the scanner".into()));
            }
        }
        let clouds: Vec<_> = images.iter().map(|img| unproject(img, &scanner)).collect();
        let mut valid = Vec::with_capacity(m);
        let mut normals = Vec::with_capacity(m);
        for (img, cloud) in images.iter().zip(&clouds) {
            let v: Vec<usize> = (0..img.len()).filter(|i| !img.drop[*i]).collect();
            let mut per_pixel = vec![Vec3::zeros(); img.len()];
            if cloud.len() > cfg.normal_k {
                let est = estimate_normals(cloud, cfg.normal_k, &Vec3::zeros()).map_err(|_| TrainError::EmptyCloud)?;
                for (k, &pix) in v.iter().enumerate() {
                    per_pixel[pix] = est.cloud.normals.as_ref().expect("normals set")[k];
                }
            }
            valid.push(v);
            normals.push(per_pixel);
        }
        let geo = if cfg.geometric_phase {
            let graph = build_graph(m, cfg.graph_window)?;
            Some(GeoProblem::downsampled(&clouds, graph, cfg.rcd.voxel_size)?)
        } else {
            None
        };
        let field = FieldParams::init(cfg.field.clone(), cfg.seed)?;
        let field_adam = AdamState::new(field.len());
        let poses = init.poses().iter().map(Se3Param::from_matrix).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9)),
            scanner,
            ids: init.ids(),
            valid,
            normals,
            field,
            field_adam,
            poses,
            pose_opt: PoseOptimizer::new(m),
            geo_opt: PoseOptimizer::new(m),
            geo,
            tracker: FrameLossTracker::new(m),
            outliers: Vec::new(),
            iter: 0,
            log: Vec::new(),
            images,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn num_frames(&self) -> usize {
        self.images.len()
    }

    pub fn progress(&self) -> f64 {
        self.iter as f64 / self.cfg.iterations.max(1) as f64
    }

    pub fn poses(&self) -> &[Se3Param] {
        &self.poses
    }

    pub fn field(&self) -> &FieldParams {
        &self.field
    }

    #[cfg(test)]
    pub(crate) fn set_pose(&mut self, frame: usize, pose: Se3Param) {
        self.poses[frame] = pose;
    }

    pub fn outliers(&self) -> &[usize] {
        &self.outliers
    }

    pub fn tracker(&self) -> &FrameLossTracker {
        &self.tracker
    }

    pub fn log(&self) -> &[LossRow] {
        &self.log
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(self.ids.iter().copied().zip(self.poses.iter().map(|p| p.matrix())).collect())
            .expect("ids validated at construction")
    }

    pub fn t_far(&self) -> f64 {
        self.scanner.max_range * self.cfg.far_margin
    }

    pub fn alpha(&self) -> f64 {
        c2f_alpha(self.progress(), self.cfg.c2f_start, self.cfg.c2f_end, self.field.layout.num_levels)
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions { num_samples: self.cfg.num_samples, alpha: Some(self.alpha()), early_stop: self.cfg.early_stop }
    }

    /// Field-gradient multiplier for `frame` at the current progress.
    pub fn field_scale(&self, frame: usize) -> f64 {
        if self.outliers.contains(&frame) {
            let w0 = self.cfg.w0_start;
            let end = self.cfg.w0_end;
            w0 + self.progress() * (end - w0)
        } else {
            1.0
        }
    }

    /// Draws the next batch for `frame` from the trainer's generator.
    pub fn draw_batch(&mut self, frame: usize) -> Batch {
        let npix = self.images[frame].len();
        let pixels: Vec<usize> = (0..self.cfg.rays_per_batch).map(|_| self.rng.random_range(0..npix)).collect();
        let n = self.cfg.num_samples;
        let jitter = self
            .cfg
            .stratified
            .then(|| pixels.iter().map(|_| (0..n).map(|_| self.rng.random::<f64>()).collect()).collect());
        let geometry = (self.cfg.cd_every > 0 && self.iter.is_multiple_of(self.cfg.cd_every) && (self.cfg.weights.cd > 0.0 || self.cfg.weights.normal > 0.0))
            .then(|| {
                let v = &self.valid[frame];
                let take = self.cfg.cd_points.min(v.len());
                let mut idx: Vec<usize> = sample_indices(&mut self.rng, v.len(), take).into_iter().map(|k| v[k]).collect();
                idx.sort_unstable();
                idx
            })
            .filter(|idx| idx.len() > self.cfg.normal_k);
        Batch { frame, pixels, jitter, geometry }
    }

    fn sensor_dir(&self, pixel: usize) -> Vec3 {
        self.scanner.direction(pixel / self.scanner.width, pixel % self.scanner.width)
    }

    fn ray(&self, frame: usize, pixel: usize) -> Ray {
        let m = self.poses[frame].matrix();
        Ray {
            origin: m.fixed_view::<3, 1>(0, 3).into_owned(),
            direction: m.fixed_view::<3, 3>(0, 0) * self.sensor_dir(pixel),
            t_near: self.cfg.t_near,
            t_far: self.t_far(),
        }
    }

    fn render(&self, frame: usize, pixels: &[usize], jitter: Option<&[Vec<f64>]>, record: bool) -> Vec<RenderOutput> {
        let opts = self.render_options();
        pixels
            .par_iter()
            .enumerate()
            .map(|(k, &pix)| render_ray(&self.field, &self.ray(frame, pix), &opts, jitter.map(|j| j[k].as_slice()), record))
            .collect()
    }

    /// Back-propagates per-ray upstream gradients, adding field gradients to
    /// `grads` and returning the frame's pose gradient.
    fn backprop(&self, frame: usize, pixels: &[usize], outs: &[RenderOutput], ups: &[Upstream], grads: &mut [f64]) -> Result<Vec6, TrainError> {
        let xi = &self.poses[frame];
        let parts: Vec<Result<(FieldGrad, Vec6), FieldError>> = outs
            .par_chunks(CHUNK)
            .zip(ups.par_chunks(CHUNK))
            .zip(pixels.par_chunks(CHUNK))
            .map(|((o, u), p)| {
                let mut fg = FieldGrad::new(&self.field);
                let mut pg = Vec6::zeros();
                for ((out, up), &pix) in o.iter().zip(u).zip(p) {
                    let rg = backward(&self.field, out, up, &mut fg)?;
                    pg += pose_gradient(xi, &self.sensor_dir(pix), &rg);
                }
                Ok((fg, pg))
            })
            .collect();
        let offset = self.field.mlp_range().start;
        let mut pose = Vec6::zeros();
        for part in parts {
            let (fg, pg) = part?;
            fg.apply(grads, offset, 1.0);
            pose += pg;
        }
        Ok(pose)
    }

    /// Loss and gradients of one iteration on `batch`; the field part is
    /// scaled by the selective-reweighting factor when `reweight` is set.
    pub fn compute_gradients(&self, batch: &Batch, reweight: bool) -> Result<IterationGradients, TrainError> {
        let f = batch.frame;
        let img = &self.images[f];
        let w = &self.cfg.weights;
        let mut field = vec![0.0; self.field.len()];
        let outs = self.render(f, &batch.pixels, batch.jitter.as_deref(), true);
        let preds: Vec<RayPrediction> = outs
            .iter()
            .map(|o| RayPrediction { depth: o.depth, intensity: o.intensity, drop_prob: o.raydrop_prob })
            .collect();
        let targets: Vec<PixelTarget> = batch
            .pixels
            .iter()
            .map(|&p| PixelTarget { depth: img.depth[p], intensity: img.intensity[p], dropped: img.drop[p] })
            .collect();
        let (render, ups) = render_loss(&preds, &targets, w)?;
        let mut pose = self.backprop(f, &batch.pixels, &outs, &ups, &mut field)?;
        let (mut cd, mut normal) = (0.0, 0.0);
        if let Some(pix) = &batch.geometry {
            let outs = self.render(f, pix, None, true);
            let dirs: Vec<Vec3> = pix.iter().map(|&p| self.sensor_dir(p)).collect();
            let synth: Vec<Vec3> = outs.iter().zip(&dirs).map(|(o, d)| d * o.depth).collect();
            let gt: Vec<Vec3> = pix.iter().zip(&dirs).map(|(&p, d)| d * img.depth[p]).collect();
            let gt_normals: Vec<Vec3> = pix.iter().map(|&p| self.normals[f][p]).collect();
            let mut g_pts = vec![Vec3::zeros(); synth.len()];
            if w.cd > 0.0 {
                let (l, g) = cd_loss_3d(&synth, &gt)?;
                cd = l;
                for (a, b) in g_pts.iter_mut().zip(&g) {
                    *a += w.cd * b;
                }
            }
            if w.normal > 0.0 {
                let (l, g) = normal_loss(&synth, &gt, &gt_normals, self.cfg.normal_k)?;
                normal = l;
                for (a, b) in g_pts.iter_mut().zip(&g) {
                    *a += w.normal * b;
                }
            }
            let ups: Vec<Upstream> = g_pts.iter().zip(&dirs).map(|(g, d)| Upstream { depth: g.dot(d), ..Default::default() }).collect();
            pose += self.backprop(f, pix, &outs, &ups, &mut field)?;
        }
        let total = render.total + w.cd * cd + w.normal * normal;
        let field_scale = if reweight { self.field_scale(f) } else { 1.0 };
        if field_scale != 1.0 {
            for g in field.iter_mut() {
                *g *= field_scale;
            }
        }
        Ok(IterationGradients { field, pose, render, cd, normal, total, field_scale })
    }

    /// One global iteration on the next frame in round-robin order, followed
    /// by the geometric phase when `m1` epochs have completed.
    pub fn step(&mut self) -> Result<(), TrainError> {
        let m = self.num_frames();
        let frame = self.iter % m;
        let p = self.progress();
        let batch = self.draw_batch(frame);
        let g = self.compute_gradients(&batch, self.cfg.selective_reweighting)?;
        if !g.total.is_finite() || g.field.iter().any(|v| !v.is_finite()) || g.pose.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                iteration: self.iter,
                frame,
                terms: format!(
                    "depth={} intensity={} raydrop={} cd={} normal={}",
                    g.render.depth, g.render.intensity, g.render.raydrop, g.cd, g.normal
                ),
            });
        }
        let lr_field = self.cfg.lr_field.at(p);
        self.field_adam.update(&mut self.field.values, &g.field, |_| lr_field);
        let (lt, lr) = (self.cfg.lr_trans.at(p), self.cfg.lr_rot.at(p));
        if frame != 0 {
            self.pose_opt.step_frame(frame, &mut self.poses[frame], &g.pose, lt, lr);
        }
        self.tracker.update(frame, g.render.total);
        self.log.push(LossRow {
            iter: self.iter,
            phase: Phase::Global,
            total: g.total,
            depth: g.render.depth,
            intensity: g.render.intensity,
            raydrop: g.render.raydrop,
            cd: g.cd,
            normal: g.normal,
            alpha: self.alpha(),
            temperature: temperature_at(p, &self.cfg.rcd),
        });
        self.iter += 1;
        if self.iter.is_multiple_of(m) && self.tracker.all_seen() {
            self.outliers = select_outliers(&self.tracker, self.cfg.top_k);
        }
        if self.iter.is_multiple_of(m * self.cfg.m1) {
            self.geometric_phase()?;
        }
        Ok(())
    }

    fn geometric_phase(&mut self) -> Result<(), TrainError> {
        let Some(problem) = &self.geo else { return Ok(()) };
        let p = self.progress();
        let (_, m2) = alternation_ratio(p, self.cfg.m1, self.cfg.alt_ratio_start, self.cfg.alt_ratio_end);
        let t = temperature_at(p, &self.cfg.rcd);
        let alpha = self.alpha();
        let k = self.cfg.geo_lr_scale;
        let (lt, lr) = (k * self.cfg.lr_trans.at(p), k * self.cfg.lr_rot.at(p));
        let mut fixed = vec![false; self.poses.len()];
        fixed[0] = true;
        let opt = if self.cfg.shared_pose_state { &mut self.pose_opt } else { &mut self.geo_opt };
        for _ in 0..m2 {
            let loss = geo_step(problem, &mut self.poses, opt, &fixed, &self.cfg.rcd, t, lt, lr)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { iteration: self.iter, frame: 0, terms: format!("graph={loss}") });
            }
            self.log.push(LossRow {
                iter: self.iter,
                phase: Phase::Geometric,
                total: loss,
                depth: 0.0,
                intensity: 0.0,
                raydrop: 0.0,
                cd: 0.0,
                normal: 0.0,
                alpha,
                temperature: t,
            });
        }
        Ok(())
    }

    pub fn run_until(&mut self, iteration: usize) -> Result<(), TrainError> {
        while self.iter < iteration.min(self.cfg.iterations) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_until(self.cfg.iterations)
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput { trajectory: self.trajectory(), field: self.field, log: self.log }
    }
}

/// Full training run from range images and initial poses.
pub fn train(images: Vec<RangeImage>, scanner: ScannerConfig, init: &Trajectory, cfg: TrainConfig) -> Result<TrainOutput, TrainError> {
    let mut t = Trainer::new(images, scanner, init, cfg)?;
    t.run()?;
    Ok(t.finish())
}
