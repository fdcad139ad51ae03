//! Trajectory, point-cloud and range-image evaluation metrics.

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{align_trajectory, invert_rigid, rotation, rotation_angle, translation, GeometryError, Trajectory};
use crate::range_image::RangeImage;
use crate::spatial::KdTree;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("pose metrics need at least 2 frames")]
    TooFewFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseMetrics {
    /// RMSE of aligned positions, scene units.
    pub ate: f64,
    /// RMSE of consecutive relative translation errors, in hundredths of a
    /// scene unit.
    pub rpe_t: f64,
    /// RMSE of consecutive relative rotation errors, degrees.
    pub rpe_r: f64,
}

/// Aligns `est` to `reference` rigidly, then reports ATE and consecutive RPE.
pub fn pose_metrics(est: &Trajectory, reference: &Trajectory) -> Result<PoseMetrics, MetricsError> {
    if est.len() < 2 {
        return Err(MetricsError::TooFewFrames);
    }
    let al = align_trajectory(est, reference, false)?;
    let ate = (al.residual / est.len() as f64).sqrt();
    let p = est.poses();
    let q = reference.poses();
    let (mut st, mut sr) = (0.0, 0.0);
    for i in 0..p.len() - 1 {
        let rel_p = invert_rigid(&p[i]) * p[i + 1];
        let rel_q = invert_rigid(&q[i]) * q[i + 1];
        let delta = invert_rigid(&rel_q) * rel_p;
        st += translation(&delta).norm_squared();
        sr += rotation_angle(&rotation(&delta)).powi(2);
    }
    let n = (p.len() - 1) as f64;
    Ok(PoseMetrics {
        ate,
        rpe_t: 100.0 * (st / n).sqrt(),
        rpe_r: (sr / n).sqrt().to_degrees(),
    })
}

/// Symmetric mean squared nearest-neighbour distance and the F-score at
/// `threshold`.
pub fn chamfer_fscore(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<(f64, f64), MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    if !(threshold > 0.0) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let tp = KdTree::build(pred).map_err(|_| MetricsError::EmptyCloud)?;
    let tg = KdTree::build(gt).map_err(|_| MetricsError::EmptyCloud)?;
    let d_pred: Vec<f64> = pred.points.iter().map(|p| tg.nearest_sq(p).1).collect();
    let d_gt: Vec<f64> = gt.points.iter().map(|p| tp.nearest_sq(p).1).collect();
    let cd = d_pred.iter().sum::<f64>() / d_pred.len() as f64 + d_gt.iter().sum::<f64>() / d_gt.len() as f64;
    let t2 = threshold * threshold;
    let precision = d_pred.iter().filter(|d| **d <= t2).count() as f64 / d_pred.len() as f64;
    let recall = d_gt.iter().filter(|d| **d <= t2).count() as f64 / d_gt.len() as f64;
    let fscore = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok((cd, fscore))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub rmse: f64,
    pub medae: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImageMetrics {
    pub depth: ErrorStats,
    pub intensity: ErrorStats,
    /// Fraction of pixels whose drop flag matches.
    pub drop_accuracy: f64,
}

pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Error statistics over pixels selected by `mask`; PSNR peak is the
/// largest selected ground-truth value.
pub fn error_stats(pred: &[f64], gt: &[f64], mask: &[bool]) -> ErrorStats {
    let mut abs = Vec::new();
    let mut peak: f64 = 0.0;
    for ((p, g), m) in pred.iter().zip(gt).zip(mask) {
        if *m {
            abs.push((p - g).abs());
            peak = peak.max(*g);
        }
    }
    if abs.is_empty() {
        return ErrorStats { rmse: 0.0, medae: 0.0, psnr: PSNR_CAP };
    }
    let mse = abs.iter().map(|e| e * e).sum::<f64>() / abs.len() as f64;
    ErrorStats { rmse: mse.sqrt(), medae: median(&mut abs), psnr: psnr(mse, peak) }
}

/// Depth and intensity errors on pixels valid in `gt`, plus drop accuracy.
pub fn image_metrics(pred: &RangeImage, gt: &RangeImage) -> Result<ImageMetrics, MetricsError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricsError::ShapeMismatch(pred.height, pred.width, gt.height, gt.width));
    }
    let mask: Vec<bool> = gt.drop.iter().map(|d| !d).collect();
    let agree = pred.drop.iter().zip(&gt.drop).filter(|(a, b)| a == b).count();
    Ok(ImageMetrics {
        depth: error_stats(&pred.depth, &gt.depth, &mask),
        intensity: error_stats(&pred.intensity, &gt.intensity, &mask),
        drop_accuracy: if gt.is_empty() { 1.0 } else { agree as f64 / gt.len() as f64 },
    })
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub seq: String,
    pub pose: PoseMetrics,
    pub cd: f64,
    pub fscore: f64,
    pub image: ImageMetrics,
}

impl MetricsRow {
    pub fn values(&self) -> [f64; 11] {
        let d = &self.image.depth;
        let i = &self.image.intensity;
        [self.pose.ate, self.pose.rpe_t, self.pose.rpe_r, self.cd, self.fscore, d.rmse, d.medae, d.psnr, i.rmse, i.medae, i.psnr]
    }

    /// Column-wise mean of `rows`, labelled `mean`.
    pub fn mean(rows: &[MetricsRow]) -> MetricsRow {
        let n = rows.len().max(1) as f64;
        let avg = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let stats = |g: &dyn Fn(&MetricsRow) -> ErrorStats| ErrorStats {
            rmse: avg(&|r| g(r).rmse),
            medae: avg(&|r| g(r).medae),
            psnr: avg(&|r| g(r).psnr),
        };
        MetricsRow {
            seq: "mean".into(),
            pose: PoseMetrics { ate: avg(&|r| r.pose.ate), rpe_t: avg(&|r| r.pose.rpe_t), rpe_r: avg(&|r| r.pose.rpe_r) },
            cd: avg(&|r| r.cd),
            fscore: avg(&|r| r.fscore),
            image: ImageMetrics {
                depth: stats(&|r| r.image.depth),
                intensity: stats(&|r| r.image.intensity),
                drop_accuracy: avg(&|r| r.image.drop_accuracy),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rigid, so3_exp, Mat4, Se3Param, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|_| {
                    let phi = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-2.0..2.0));
                    let t = Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.2));
                    rigid(&so3_exp(&phi), &t)
                })
                .collect(),
        )
    }

    #[test]
    fn identical_and_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_traj(&mut rng, 10);
        let m = pose_metrics(&t, &t).unwrap();
        assert!(m.ate < 1e-12 && m.rpe_t < 1e-10 && m.rpe_r < 1e-6);
        let shift = rigid(&so3_exp(&Vec3::zeros()), &Vec3::new(0.3, -0.2, 0.1));
        let moved = t.transformed(&shift);
        let m = pose_metrics(&moved, &t).unwrap();
        assert!(m.ate < 1e-12, "{}", m.ate);
        assert!(m.rpe_t < 1e-10 && m.rpe_r < 1e-6);
    }

    #[test]
    fn invariant_under_common_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_traj(&mut rng, 12);
        let b = random_traj(&mut rng, 12);
        let base = pose_metrics(&a, &b).unwrap();
        for _ in 0..5 {
            let g = Se3Param::new(
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            )
            .matrix();
            let m = pose_metrics(&a.transformed(&g), &b).unwrap();
            assert!((m.ate - base.ate).abs() < 1e-9);
            assert!((m.rpe_t - base.rpe_t).abs() < 1e-9);
            assert!((m.rpe_r - base.rpe_r).abs() < 1e-9);
        }
    }

    #[test]
    fn single_displaced_frame() {
        // planar square path; one frame moved by 0.1 in z
        let reference = Trajectory::from_poses(
            [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)]
                .iter()
                .map(|(x, y)| rigid(&so3_exp(&Vec3::zeros()), &Vec3::new(*x, *y, 0.0)))
                .collect(),
        );
        let mut poses = reference.poses();
        poses[4][(2, 3)] += 0.1;
        let est = Trajectory::from_poses(poses);
        let m = pose_metrics(&est, &reference).unwrap();
        // direct least squares: best rigid fit of est positions onto reference
        let al = crate::geometry::fit_similarity(&est.positions(), &reference.positions(), false).unwrap();
        let res: f64 = est
            .positions()
            .iter()
            .zip(reference.positions())
            .map(|(p, q)| (al.0 * p + al.1 - q).norm_squared())
            .sum();
        assert!((m.ate - (res / 5.0).sqrt()).abs() < 1e-12);
        assert!(m.ate > 0.0 && m.ate < 0.1);
    }

    #[test]
    fn frame_mismatch() {
        let a = Trajectory::new(vec![(0, Mat4::identity()), (1, Mat4::identity())]).unwrap();
        let b = Trajectory::new(vec![(0, Mat4::identity()), (2, Mat4::identity())]).unwrap();
        assert!(matches!(pose_metrics(&a, &b), Err(MetricsError::Geometry(GeometryError::FrameMismatch(_)))));
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::from_points((0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect())
    }

    #[test]
    fn chamfer_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_cloud(&mut rng, 100);
        assert_eq!(chamfer_fscore(&a, &a, 0.05).unwrap(), (0.0, 1.0));
        let shifted = PointCloud::from_points(a.points.iter().map(|p| p + Vec3::new(5.0, 0.0, 0.0)).collect());
        assert_eq!(chamfer_fscore(&shifted, &a, 0.05).unwrap().1, 0.0);
        let b = random_cloud(&mut rng, 100);
        let (cd, f) = chamfer_fscore(&a, &b, 0.1).unwrap();
        let nn = |p: &Vec3, c: &PointCloud| c.points.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
        let da: Vec<f64> = a.points.iter().map(|p| nn(p, &b)).collect();
        let db: Vec<f64> = b.points.iter().map(|p| nn(p, &a)).collect();
        let cd_ref = da.iter().sum::<f64>() / 100.0 + db.iter().sum::<f64>() / 100.0;
        let pr = da.iter().filter(|d| d.sqrt() <= 0.1).count() as f64 / 100.0;
        let rc = db.iter().filter(|d| d.sqrt() <= 0.1).count() as f64 / 100.0;
        assert!((cd - cd_ref).abs() < 1e-9);
        assert!((f - 2.0 * pr * rc / (pr + rc)).abs() < 1e-9);
        assert_eq!(chamfer_fscore(&PointCloud::default(), &a, 0.1), Err(MetricsError::EmptyCloud));
    }

    #[test]
    fn image_examples() {
        let mut gt = RangeImage::empty(2, 3);
        for r in 0..2 {
            for c in 0..3 {
                gt.set(r, c, 2.0 + (r * 3 + c) as f64, 0.5);
            }
        }
        let m = image_metrics(&gt, &gt).unwrap();
        assert_eq!(m.depth, ErrorStats { rmse: 0.0, medae: 0.0, psnr: PSNR_CAP });
        assert_eq!(m.drop_accuracy, 1.0);
        // constant error 1 with peak 10
        let mut g = RangeImage::empty(1, 4);
        let mut p = RangeImage::empty(1, 4);
        for (c, v) in [10.0, 4.0, 6.0, 8.0].iter().enumerate() {
            g.set(0, c, *v, 0.0);
            p.set(0, c, v + 1.0, 0.0);
        }
        let m = image_metrics(&p, &g).unwrap();
        assert!((m.depth.rmse - 1.0).abs() < 1e-12);
        assert!((m.depth.medae - 1.0).abs() < 1e-12);
        assert!((m.depth.psnr - 20.0).abs() < 1e-12);
        assert!(matches!(image_metrics(&RangeImage::empty(1, 2), &g), Err(MetricsError::ShapeMismatch(..))));
    }

    #[test]
    fn image_random_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = RangeImage::empty(4, 5);
        let mut p = RangeImage::empty(4, 5);
        for i in 0..20 {
            if rng.random_bool(0.8) {
                g.set(i / 5, i % 5, rng.random_range(0.1..1.0), rng.random());
            }
            p.set(i / 5, i % 5, rng.random_range(0.1..1.0), rng.random());
        }
        let m = image_metrics(&p, &g).unwrap();
        let idx: Vec<usize> = (0..20).filter(|i| !g.drop[*i]).collect();
        let errs: Vec<f64> = idx.iter().map(|i| (p.depth[*i] - g.depth[*i]).abs()).collect();
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
        let mut sorted = errs.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let med = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        let peak = idx.iter().map(|i| g.depth[*i]).fold(0.0, f64::max);
        assert!((m.depth.rmse - mse.sqrt()).abs() < 1e-12);
        assert!((m.depth.medae - med).abs() < 1e-12);
        assert!((m.depth.psnr - 10.0 * (peak * peak / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_monotone() {
        let mut last = f64::INFINITY;
        for k in 1..50 {
            let v = psnr(k as f64 * 1e-3, 1.0);
            assert!(v < last);
            last = v;
        }
        assert_eq!(psnr(0.0, 1.0), PSNR_CAP);
    }

    #[test]
    fn mean_row() {
        let a = MetricsRow { seq: "a".into(), cd: 1.0, fscore: 0.5, ..Default::default() };
        let b = MetricsRow { seq: "b".into(), cd: 3.0, fscore: 1.0, ..Default::default() };
        let m = MetricsRow::mean(&[a, b]);
        assert_eq!(m.seq, "mean");
        assert_eq!(m.cd, 2.0);
        assert_eq!(m.fscore, 0.75);
    }
}
