//! Rendering from a trained field and pose-only registration of new scans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::losses::{render_loss, LossWeights, PixelTarget, RayPrediction};
use super::TrainError;
use crate::field::{backward, pose_gradient, render_ray, FieldGrad, FieldParams, Ray, RenderOptions};
use crate::geo::PoseOptimizer;
use crate::geometry::{Mat4, Se3Param, Vec6};
use crate::optim::LrSchedule;
use crate::range_image::{RangeImage, ScannerConfig};

fn pixel_ray(pose: &Mat4, scanner: &ScannerConfig, pixel: usize, t_near: f64, t_far: f64) -> Ray {
    let d = scanner.direction(pixel / scanner.width, pixel % scanner.width);
    Ray {
        origin: pose.fixed_view::<3, 1>(0, 3).into_owned(),
        direction: pose.fixed_view::<3, 3>(0, 0) * d,
        t_near,
        t_far,
    }
}

/// Renders a full range image; pixels with drop probability above 0.5 are
/// marked dropped.
pub fn render_range_image(field: &FieldParams, pose: &Mat4, scanner: &ScannerConfig, opts: &RenderOptions, t_near: f64, t_far: f64) -> RangeImage {
    let n = scanner.height * scanner.width;
    let outs: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let o = render_ray(field, &pixel_ray(pose, scanner, p, t_near, t_far), opts, None, false);
            (o.depth, o.intensity, o.raydrop_prob)
        })
        .collect();
    let mut img = RangeImage::empty(scanner.height, scanner.width);
    for (p, (depth, intensity, drop)) in outs.into_iter().enumerate() {
        if drop <= 0.5 {
            img.set(p / scanner.width, p % scanner.width, depth, intensity);
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct NovelViewConfig {
    pub steps: usize,
    pub rays_per_step: usize,
    pub num_samples: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub lr_trans: LrSchedule,
    pub lr_rot: LrSchedule,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for NovelViewConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            rays_per_step: 512,
            num_samples: 64,
            t_near: 0.01,
            t_far: 1.0,
            lr_trans: LrSchedule::new(2e-3, 1e-4),
            lr_rot: LrSchedule::new(5e-3, 2e-4),
            weights: LossWeights { normal: 0.0, cd: 0.0, ..LossWeights::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NovelViewResult {
    pub pose: Se3Param,
    pub loss: f64,
}

/// Fits the pose of `target` against a frozen field, starting from `init`.
pub fn register_novel_view(
    field: &FieldParams,
    target: &RangeImage,
    scanner: &ScannerConfig,
    init: &Se3Param,
    cfg: &NovelViewConfig,
) -> Result<NovelViewResult, TrainError> {
    if target.height != scanner.height || target.width != scanner.width {
        return Err(TrainError::InvalidConfig("range image shape differs from the scanner".into()));
    }
    if cfg.rays_per_step == 0 || cfg.num_samples == 0 || !(cfg.t_far > cfg.t_near) {
        return Err(TrainError::InvalidConfig("bad novel-view sampling settings".into()));
    }
    let opts = RenderOptions { num_samples: cfg.num_samples, alpha: None, early_stop: 1e-4 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pose = *init;
    let mut opt = PoseOptimizer::new(1);
    let mut loss = f64::NAN;
    let npix = target.len();
    for step in 0..cfg.steps {
        let p = step as f64 / cfg.steps as f64;
        let pixels: Vec<usize> = (0..cfg.rays_per_step).map(|_| rng.random_range(0..npix)).collect();
        let m = pose.matrix();
        let outs: Vec<_> = pixels
            .par_iter()
            .map(|&px| render_ray(field, &pixel_ray(&m, scanner, px, cfg.t_near, cfg.t_far), &opts, None, true))
            .collect();
        let preds: Vec<RayPrediction> = outs
            .iter()
            .map(|o| RayPrediction { depth: o.depth, intensity: o.intensity, drop_prob: o.raydrop_prob })
            .collect();
        let targets: Vec<PixelTarget> = pixels
            .iter()
            .map(|&px| PixelTarget { depth: target.depth[px], intensity: target.intensity[px], dropped: target.drop[px] })
            .collect();
        let (l, ups) = render_loss(&preds, &targets, &cfg.weights)?;
        loss = l.total;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: step, frame: 0, terms: format!("{l:?}") });
        }
        let mut grad = Vec6::zeros();
        // field gradients are computed and discarded; only the pose moves
        let mut sink = FieldGrad::new(field);
        for ((o, u), &px) in outs.iter().zip(&ups).zip(&pixels) {
            let rg = backward(field, o, u, &mut sink)?;
            grad += pose_gradient(&pose, &scanner.direction(px / scanner.width, px % scanner.width), &rg);
        }
        opt.step_frame(0, &mut pose, &grad, cfg.lr_trans.at(p), cfg.lr_rot.at(p));
    }
    Ok(NovelViewResult { pose, loss })
}
