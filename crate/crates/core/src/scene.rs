//! Synthetic ground truth: parametric scenes inside the unit cube, an
//! analytic LiDAR scanner, preset trajectories and pose perturbation.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{rigid, rotation, so3_exp, translation, Mat3, Mat4, Trajectory, Vec3};
use crate::range_image::{unproject, RangeImage, ScannerConfig};
use crate::spatial::KdTree;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("unknown scene preset '{0}' (expected corridor, intersection or low_overlap)")]
    UnknownPreset(String),
    #[error("trajectory needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Rectangle through `point` with unit `normal`; `axis_u` lies in the
    /// plane and `half` gives the half extents along `axis_u` and
    /// `normal x axis_u`.
    Plane { point: Vec3, normal: Vec3, axis_u: Vec3, half: (f64, f64) },
    Box { center: Vec3, half: Vec3, rotation: Mat3 },
    /// Capped cylinder from `base` along the unit `axis`.
    Cylinder { base: Vec3, axis: Vec3, radius: f64, height: f64 },
    Sphere { center: Vec3, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub shape: Primitive,
    pub reflectance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    pub reflectance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub surfaces: Vec<Surface>,
}

fn first_positive(ts: [f64; 2]) -> Option<f64> {
    ts.into_iter().filter(|t| *t > HIT_EPS).fold(None, |a, t| Some(a.map_or(t, |a: f64| a.min(t))))
}

impl Primitive {
    /// Nearest intersection with `t > 0` and its unit normal.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Plane { point, normal, axis_u, half } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - o)) / denom;
                if t <= HIT_EPS {
                    return None;
                }
                let rel = o + t * d - point;
                let axis_v = normal.cross(axis_u);
                (rel.dot(axis_u).abs() <= half.0 && rel.dot(&axis_v).abs() <= half.1).then_some((t, *normal))
            }
            Primitive::Box { center, half, rotation } => {
                let lo = rotation.transpose() * (o - center);
                let ld = rotation.transpose() * d;
                let mut t_in = f64::NEG_INFINITY;
                let mut t_out = f64::INFINITY;
                let mut axis_in = 0;
                let mut axis_out = 0;
                for k in 0..3 {
                    if ld[k].abs() < 1e-15 {
                        if lo[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - lo[k]) / ld[k];
                    let b = (half[k] - lo[k]) / ld[k];
                    let (a, b) = if a < b { (a, b) } else { (b, a) };
                    if a > t_in {
                        t_in = a;
                        axis_in = k;
                    }
                    if b < t_out {
                        t_out = b;
                        axis_out = k;
                    }
                }
                if t_in > t_out {
                    return None;
                }
                let (t, k) = if t_in > HIT_EPS {
                    (t_in, axis_in)
                } else if t_out > HIT_EPS {
                    (t_out, axis_out)
                } else {
                    return None;
                };
                let p = lo + t * ld;
                let mut n = Vec3::zeros();
                n[k] = p[k].signum();
                Some((t, rotation * n))
            }
            Primitive::Cylinder { base, axis, radius, height } => {
                let w = o - base;
                let dp = d - d.dot(axis) * axis;
                let wp = w - w.dot(axis) * axis;
                let mut best: Option<(f64, Vec3)> = None;
                let mut take = |t: f64, n: Vec3| {
                    if t > HIT_EPS && best.is_none_or(|(b, _)| t < b) {
                        best = Some((t, n));
                    }
                };
                let a = dp.dot(&dp);
                if a > 1e-15 {
                    let b = 2.0 * wp.dot(&dp);
                    let c = wp.dot(&wp) - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                            let h = (w + t * d).dot(axis);
                            if (0.0..=*height).contains(&h) {
                                take(t, (wp + t * dp) / *radius);
                            }
                        }
                    }
                }
                let da = d.dot(axis);
                if da.abs() > 1e-15 {
                    for (level, n) in [(0.0, -axis), (*height, *axis)] {
                        let t = (level - w.dot(axis)) / da;
                        let q = w + t * d;
                        if (q - q.dot(axis) * axis).norm() <= *radius {
                            take(t, n);
                        }
                    }
                }
                best
            }
            Primitive::Sphere { center, radius } => {
                let w = o - center;
                let b = w.dot(d);
                let c = w.dot(&w) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = first_positive([-b - s, -b + s])?;
                Some((t, (w + t * d) / *radius))
            }
        }
    }

    /// Distance from `p` to the primitive's surface (exact for planes and
    /// spheres, used as an on-surface residual for the others).
    pub fn surface_residual(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Plane { point, normal, .. } => normal.dot(&(p - point)).abs(),
            Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Primitive::Box { center, half, rotation } => {
                let l = rotation.transpose() * (p - center);
                let q = l.abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Primitive::Cylinder { base, axis, radius, height } => {
                let w = p - base;
                let h = w.dot(axis);
                let r = (w - h * axis).norm();
                let dr = r - radius;
                let dh = (h - height / 2.0).abs() - height / 2.0;
                let outside = (dr.max(0.0).powi(2) + dh.max(0.0).powi(2)).sqrt();
                (outside + dr.max(dh).min(0.0)).abs()
            }
        }
    }
}

impl Scene {
    pub fn intersect(&self, o: &Vec3, d: &Vec3, max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for s in &self.surfaces {
            if let Some((t, n)) = s.shape.intersect(o, d) {
                if t <= max_range && best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, normal: n, reflectance: s.reflectance });
                }
            }
        }
        best
    }

    /// Smallest surface residual over all primitives.
    pub fn residual(&self, p: &Vec3) -> f64 {
        self.surfaces.iter().map(|s| s.shape.surface_residual(p)).fold(f64::INFINITY, f64::min)
    }
}

/// Casts every pixel of the scanner at `pose`. Misses and random drops
/// (probability `drop_prob_base`) are marked dropped. The returned cloud is
/// in the sensor frame.
pub fn lidar_scan(scene: &Scene, pose: &Mat4, cfg: &ScannerConfig, seed: u64) -> (RangeImage, PointCloud) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rotation(pose);
    let o = translation(pose);
    let mut img = RangeImage::empty(cfg.height, cfg.width);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let u: f64 = rng.random();
            let d = r * cfg.direction(row, col);
            let Some(hit) = scene.intersect(&o, &d, cfg.max_range) else { continue };
            if u < cfg.drop_prob_base {
                continue;
            }
            let intensity = hit.reflectance * hit.normal.dot(&d).abs();
            img.set(row, col, hit.t, intensity);
        }
    }
    let cloud = unproject(&img, cfg);
    (img, cloud)
}

/// Perturbs every frame but the first: rotation `Exp(a) R` with `|a|`
/// normal with std `sigma_rot_deg` about a uniform axis, translation plus
/// isotropic normal noise with std `sigma_trans` per axis.
pub fn perturb_poses(gt: &Trajectory, sigma_rot_deg: f64, sigma_trans: f64, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = gt
        .frames()
        .iter()
        .enumerate()
        .map(|(k, (id, pose))| {
            if k == 0 {
                return (*id, *pose);
            }
            let axis = random_unit(&mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            let angle = z * sigma_rot_deg.to_radians();
            let dt = Vec3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sigma_trans
            });
            let r = so3_exp(&(axis * angle)) * rotation(pose);
            (*id, rigid(&r, &(translation(pose) + dt)))
        })
        .collect();
    Trajectory::new(frames).expect("ids carried over from a valid trajectory")
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Corridor,
    Intersection,
    LowOverlap,
}

impl FromStr for Preset {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corridor" => Ok(Preset::Corridor),
            "intersection" => Ok(Preset::Intersection),
            "low_overlap" => Ok(Preset::LowOverlap),
            other => Err(SceneError::UnknownPreset(other.to_string())),
        }
    }
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Corridor => "corridor",
            Preset::Intersection => "intersection",
            Preset::LowOverlap => "low_overlap",
        }
    }
}

fn wall(point: Vec3, normal: Vec3, axis_u: Vec3, half: (f64, f64), reflectance: f64) -> Surface {
    Surface { shape: Primitive::Plane { point, normal, axis_u, half }, reflectance }
}

fn yaw(a: f64) -> Mat3 {
    so3_exp(&Vec3::new(0.0, 0.0, a))
}

fn random_box(rng: &mut ChaCha8Rng, center_xy: (f64, f64), size: (f64, f64), z_range: (f64, f64)) -> Surface {
    let half = Vec3::new(
        rng.random_range(size.0..size.1),
        rng.random_range(size.0..size.1),
        rng.random_range(size.0..size.1),
    );
    let z = rng.random_range(z_range.0..z_range.1);
    Surface {
        shape: Primitive::Box {
            center: Vec3::new(center_xy.0, center_xy.1, z),
            half,
            rotation: yaw(rng.random_range(-0.6..0.6)),
        },
        reflectance: rng.random_range(0.3..0.95),
    }
}

/// Deterministic scene for `(preset, seed)`; everything lies in the unit cube.
pub fn make_scene(preset: Preset, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5CE4E);
    let mut surfaces = Vec::new();
    match preset {
        Preset::Corridor => {
            surfaces.push(wall(Vec3::new(0.5, 0.3, 0.5), Vec3::y(), Vec3::x(), (0.48, 0.3), 0.6));
            surfaces.push(wall(Vec3::new(0.5, 0.7, 0.5), -Vec3::y(), Vec3::x(), (0.48, 0.3), 0.7));
            for k in 0..8 {
                let x = 0.08 + 0.84 * (k as f64 + rng.random_range(0.2..0.8)) / 8.0;
                let side = if k % 2 == 0 { 0.36 } else { 0.64 };
                let y = side + rng.random_range(-0.02..0.02);
                surfaces.push(random_box(&mut rng, (x, y), (0.025, 0.06), (0.3, 0.6)));
            }
        }
        Preset::Intersection => {
            let (lo, hi) = (0.35, 0.65);
            let arm = (lo - 0.02) / 2.0;
            for (c, n) in [(lo, 1.0), (hi, -1.0)] {
                for mid in [0.02 + arm, hi + arm] {
                    surfaces.push(wall(Vec3::new(mid, c, 0.5), Vec3::y() * n, Vec3::x(), (arm, 0.3), 0.65));
                    surfaces.push(wall(Vec3::new(c, mid, 0.5), Vec3::x() * n, Vec3::y(), (arm, 0.3), 0.55));
                }
            }
            for (x, y) in [(0.2, 0.4), (0.12, 0.6), (0.6, 0.8), (0.4, 0.9), (0.8, 0.42), (0.4, 0.15)] {
                surfaces.push(random_box(&mut rng, (x, y), (0.025, 0.05), (0.3, 0.6)));
            }
            surfaces.push(Surface {
                shape: Primitive::Cylinder { base: Vec3::new(0.62, 0.38, 0.25), axis: Vec3::z(), radius: 0.025, height: 0.5 },
                reflectance: 0.8,
            });
            surfaces.push(Surface { shape: Primitive::Sphere { center: Vec3::new(0.45, 0.45, 0.3), radius: 0.04 }, reflectance: 0.9 });
        }
        Preset::LowOverlap => {
            for k in 0..14 {
                let x = 0.05 + 0.9 * (k as f64 + rng.random_range(0.2..0.8)) / 14.0;
                let side = if k % 2 == 0 { -1.0 } else { 1.0 };
                let y = 0.5 + side * rng.random_range(0.05..0.1);
                let reflectance = rng.random_range(0.3..0.95);
                if k % 3 == 0 {
                    surfaces.push(Surface {
                        shape: Primitive::Cylinder {
                            base: Vec3::new(x, y, 0.35),
                            axis: Vec3::z(),
                            radius: rng.random_range(0.015..0.03),
                            height: rng.random_range(0.15..0.3),
                        },
                        reflectance,
                    });
                } else {
                    surfaces.push(random_box(&mut rng, (x, y), (0.015, 0.035), (0.42, 0.55)));
                }
            }
        }
    }
    Scene { surfaces }
}

/// Scanner settings matched to each preset's scale.
pub fn preset_scanner(preset: Preset) -> ScannerConfig {
    let max_range = match preset {
        Preset::Corridor => 0.6,
        Preset::Intersection => 0.6,
        Preset::LowOverlap => 0.2,
    };
    ScannerConfig { max_range, ..ScannerConfig::default() }
}

/// Ground-truth sensor trajectory for a preset: a gently curving line with
/// yaw drift (corridor, low_overlap) or a quarter arc (intersection).
pub fn preset_trajectory(preset: Preset, frames: usize, seed: u64) -> Result<Trajectory, SceneError> {
    if frames < 2 {
        return Err(SceneError::TooFewFrames(frames));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A1E);
    let phase = rng.random_range(0.0..2.0 * PI);
    let drift = Normal::new(0.0, 0.5f64.to_radians()).expect("valid std");
    let mut heading_noise = 0.0;
    let poses = (0..frames)
        .map(|k| {
            let s = k as f64 / (frames - 1) as f64;
            heading_noise += drift.sample(&mut rng);
            let (p, heading) = match preset {
                Preset::Corridor | Preset::LowOverlap => {
                    let (x0, x1) = if preset == Preset::Corridor { (0.3, 0.7) } else { (0.12, 0.88) };
                    let x = x0 + (x1 - x0) * s;
                    let y = 0.5 + 0.03 * (PI * s + phase).sin();
                    let slope = 0.03 * PI * (PI * s + phase).cos() / (x1 - x0);
                    (Vec3::new(x, y, 0.5), slope.atan())
                }
                Preset::Intersection => {
                    let a = 0.5 * PI * s;
                    let p = Vec3::new(0.15 + 0.35 * a.sin(), 0.85 - 0.35 * a.cos(), 0.5);
                    (p, a)
                }
            };
            let yaw_drift = 3f64.to_radians() * (2.0 * PI * s + phase).sin() + heading_noise;
            rigid(&yaw(heading + yaw_drift), &p)
        })
        .collect();
    Ok(Trajectory::from_poses(poses))
}

/// Mutual nearest-neighbour overlap of two world-frame clouds: the number
/// of pairs `(a, b)` that are each other's nearest neighbour within
/// `radius`, relative to the mean cloud size.
pub fn overlap_fraction(a: &[Vec3], b: &[Vec3], radius: f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let ta = KdTree::from_points(a).expect("non-empty");
    let tb = KdTree::from_points(b).expect("non-empty");
    let r2 = radius * radius;
    let pairs = a
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let (j, d2) = tb.nearest_sq(p);
            d2 <= r2 && ta.nearest_sq(&b[j]).0 == *i
        })
        .count();
    2.0 * pairs as f64 / (a.len() + b.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle, transform_point};
    use crate::range_image::project_points;

    #[test]
    fn scenes_are_deterministic_and_in_cube() {
        for p in [Preset::Corridor, Preset::Intersection, Preset::LowOverlap] {
            assert_eq!(make_scene(p, 3), make_scene(p, 3));
            assert_ne!(make_scene(p, 3), make_scene(p, 4));
            for s in &make_scene(p, 3).surfaces {
                assert!((0.0..=1.0).contains(&s.reflectance));
                let inside = |v: &Vec3| v.iter().all(|c| (0.0..=1.0).contains(c));
                match &s.shape {
                    Primitive::Plane { point, normal, axis_u, half } => {
                        let av = normal.cross(axis_u);
                        for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                            assert!(inside(&(point + a * half.0 * axis_u + b * half.1 * av)));
                        }
                    }
                    Primitive::Box { center, half, .. } => {
                        assert!(inside(&(center.add_scalar(half.norm()))) && inside(&center.add_scalar(-half.norm())))
                    }
                    Primitive::Cylinder { base, radius, height, axis } => {
                        assert!(inside(&base.add_scalar(-radius)) && inside(&(base + axis * *height).add_scalar(*radius)))
                    }
                    Primitive::Sphere { center, radius } => {
                        assert!(inside(&center.add_scalar(*radius)) && inside(&center.add_scalar(-radius)))
                    }
                }
            }
        }
        let corridor = make_scene(Preset::Corridor, 1);
        let planes = corridor.surfaces.iter().filter(|s| matches!(s.shape, Primitive::Plane { .. })).count();
        let boxes = corridor.surfaces.iter().filter(|s| matches!(s.shape, Primitive::Box { .. })).count();
        assert_eq!(planes, 2);
        assert_eq!(boxes, corridor.surfaces.len() - 2);
        assert!("plaza".parse::<Preset>().is_err());
    }

    #[test]
    fn plane_below_scanner() {
        let scene = Scene {
            surfaces: vec![wall(Vec3::new(0.0, 0.0, -0.1), Vec3::z(), Vec3::x(), (100.0, 100.0), 0.5)],
        };
        let cfg = ScannerConfig { max_range: 100.0, drop_prob_base: 0.0, ..Default::default() };
        let (img, cloud) = lidar_scan(&scene, &Mat4::identity(), &cfg, 0);
        for row in 0..cfg.height {
            let phi = cfg.elevation(row);
            for col in 0..cfg.width {
                let i = img.index(row, col);
                if phi < 0.0 {
                    let expect = 0.1 / (-phi).sin();
                    assert!(!img.drop[i]);
                    assert!((img.depth[i] - expect).abs() < 1e-9);
                    assert!((img.intensity[i] - 0.5 * (-phi).sin()).abs() < 1e-9);
                } else {
                    assert!(img.drop[i]);
                }
            }
        }
        assert!(cloud.points.iter().all(|p| (p.z + 0.1).abs() < 1e-9));
    }

    #[test]
    fn empty_scene_drops_everything() {
        let cfg = ScannerConfig::default();
        let (img, cloud) = lidar_scan(&Scene::default(), &Mat4::identity(), &cfg, 0);
        assert_eq!(img.valid_count(), 0);
        assert!(cloud.is_empty());
    }

    #[test]
    fn sphere_on_axis_is_symmetric() {
        let scene = Scene { surfaces: vec![Surface { shape: Primitive::Sphere { center: Vec3::new(0.0, 0.0, -0.5), radius: 0.4 }, reflectance: 1.0 }] };
        let cfg = ScannerConfig { max_range: 10.0, drop_prob_base: 0.0, fov_down_deg: -89.0, ..Default::default() };
        let (img, _) = lidar_scan(&scene, &Mat4::identity(), &cfg, 0);
        for row in 0..cfg.height {
            let first = img.depth[img.index(row, 0)];
            for col in 1..cfg.width {
                assert!((img.depth[img.index(row, col)] - first).abs() < 1e-9);
            }
        }
        assert!(img.valid_count() > 0);
    }

    #[test]
    fn scan_points_lie_on_surfaces_and_round_trip() {
        for preset in [Preset::Corridor, Preset::Intersection, Preset::LowOverlap] {
            let scene = make_scene(preset, 2);
            let cfg = preset_scanner(preset);
            let traj = preset_trajectory(preset, 8, 2).unwrap();
            let pose = traj.poses()[3];
            let (img, cloud) = lidar_scan(&scene, &pose, &cfg, 9);
            assert!(cloud.len() > 500, "{preset:?} has {} points", cloud.len());
            for p in &cloud.points {
                let w = transform_point(&pose, p);
                assert!(scene.residual(&w) < 1e-9);
                assert!(w.iter().all(|c| (-1e-9..=1.0 + 1e-9).contains(c)));
            }
            // depth equals the unprojected radius
            let mut k = 0;
            for i in 0..img.len() {
                if !img.drop[i] {
                    assert!((cloud.points[k].norm() - img.depth[i]).abs() < 1e-9);
                    k += 1;
                }
            }
            let again = project_points(&cloud, &cfg);
            let back = unproject(&again, &cfg);
            assert_eq!(back.len(), cloud.len());
            let err = back.points.iter().zip(&cloud.points).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn drop_rate_follows_base_probability() {
        let scene = make_scene(Preset::Corridor, 0);
        let mut cfg = preset_scanner(Preset::Corridor);
        cfg.drop_prob_base = 0.0;
        let pose = preset_trajectory(Preset::Corridor, 8, 0).unwrap().poses()[4];
        let (full, _) = lidar_scan(&scene, &pose, &cfg, 1);
        cfg.drop_prob_base = 0.2;
        let (some, _) = lidar_scan(&scene, &pose, &cfg, 1);
        let ratio = some.valid_count() as f64 / full.valid_count() as f64;
        assert!((ratio - 0.8).abs() < 0.03, "{ratio}");
        assert_eq!(lidar_scan(&scene, &pose, &cfg, 1).0, some);
    }

    #[test]
    fn low_overlap_consecutive_frames() {
        let preset = Preset::LowOverlap;
        let scene = make_scene(preset, 0);
        let cfg = preset_scanner(preset);
        let traj = preset_trajectory(preset, 8, 0).unwrap();
        let worlds: Vec<Vec<Vec3>> = traj
            .poses()
            .iter()
            .enumerate()
            .map(|(k, pose)| lidar_scan(&scene, pose, &cfg, k as u64).1.points.iter().map(|p| transform_point(pose, p)).collect())
            .collect();
        for k in 0..7 {
            let o = overlap_fraction(&worlds[k], &worlds[k + 1], 0.02);
            assert!(o < 0.4, "frames {k}-{}: overlap {o}", k + 1);
        }
    }

    #[test]
    fn trajectories_are_not_collinear() {
        for preset in [Preset::Corridor, Preset::Intersection, Preset::LowOverlap] {
            let t = preset_trajectory(preset, 8, 5).unwrap();
            let pos = t.positions();
            let a = pos[7] - pos[0];
            let off = pos.iter().map(|p| (p - pos[0]).cross(&a).norm() / a.norm()).fold(0.0, f64::max);
            assert!(off > 5e-3, "{preset:?}: {off}");
        }
        assert!(preset_trajectory(Preset::Corridor, 1, 0).is_err());
    }

    #[test]
    fn perturbation_rules() {
        let gt = preset_trajectory(Preset::Corridor, 8, 0).unwrap();
        assert_eq!(perturb_poses(&gt, 0.0, 0.0, 3), gt);
        for seed in 0..5 {
            let p = perturb_poses(&gt, 5.0, 0.1, seed);
            assert_eq!(p.poses()[0], gt.poses()[0]);
            assert_eq!(p, perturb_poses(&gt, 5.0, 0.1, seed));
        }
        // folded-normal mean of the angle magnitude
        let many = Trajectory::from_poses(vec![Mat4::identity(); 1001]);
        let p = perturb_poses(&many, 5.0, 0.0, 11);
        let mean = p.poses()[1..].iter().map(|m| rotation_angle(&rotation(m)).to_degrees()).sum::<f64>() / 1000.0;
        let expect = 5.0 * (2.0 / PI).sqrt();
        assert!((mean - expect).abs() / expect < 0.05, "{mean} vs {expect}");
    }
}
