//! Rigid-body geometry: SO(3)/SE(3) exponential maps, the decoupled pose
//! parameterization used by the optimizers, point transforms and closed-form
//! trajectory alignment.
//!
//! Poses are stored as a 6-vector `[rho; phi]` (translation, axis-angle).
//! Two maps turn a parameter into a 4x4 transform:
//!
//! * [`se3_full_exp`]: the true exponential, translation column `J(phi) * rho`.
//! * [`se3_decoupled`]: rotation `exp(phi)`, translation column exactly `rho`.
//!
//! The optimizers use the decoupled map so that translation and rotation
//! updates do not interact.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use std::f64::consts::PI;
use thiserror::Error;

use crate::cloud::PointCloud;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Below this angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("trajectory frame ids do not match: {0}")]
    FrameMismatch(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `sin(x)/x`
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// `(1 - cos x) / x^2`, evaluated without cancellation.
fn one_minus_cos_over_sq(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        0.5 - x2 / 24.0 + x2 * x2 / 720.0
    } else {
        let s = (0.5 * x).sin();
        2.0 * s * s / (x * x)
    }
}

/// `(x - sin x) / x^3`
fn x_minus_sin_over_cube(x: f64) -> f64 {
    if x.abs() < 2e-2 {
        let x2 = x * x;
        1.0 / 6.0 - x2 / 120.0 + x2 * x2 / 5040.0 - x2 * x2 * x2 / 362_880.0
    } else {
        (x - x.sin()) / (x * x * x)
    }
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k2;
    }
    Mat3::identity() + sinc(theta) * k + one_minus_cos_over_sq(theta) * k2
}

/// Left Jacobian of SO(3), `sum_n (phi^)^n / (n+1)!`.
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Mat3::identity() + 0.5 * k + k2 / 6.0;
    }
    Mat3::identity() + one_minus_cos_over_sq(theta) * k + x_minus_sin_over_cube(theta) * k2
}

/// Inverse of [`so3_exp`] on rotation matrices, returning `|phi| <= pi`.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let theta = rotation_angle(r);
    if theta < 1e-6 {
        // first order: R - R^T = 2 phi^
        return 0.5 * w;
    }
    if PI - theta < 1e-4 {
        // near pi the antisymmetric part vanishes; the symmetric part minus
        // cos(theta) I is (1 - cos theta) a a^T with no skew contamination
        let b = 0.5 * (r + r.transpose()) - Mat3::identity() * (0.5 * (r.trace() - 1.0));
        let mut best = 0;
        for i in 1..3 {
            if b[(i, i)] > b[(best, best)] {
                best = i;
            }
        }
        let mut axis = b.column(best).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return theta * axis;
    }
    w * (theta / (2.0 * theta.sin()))
}

/// Rotation angle of `r` in radians, in `[0, pi]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    // atan2 keeps full precision near 0 where acos of the trace does not
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * w.norm()).atan2(0.5 * (r.trace() - 1.0))
}

/// Learnable pose parameter `xi = [rho; phi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Se3Param {
    pub rho: Vec3,
    pub phi: Vec3,
}

impl Se3Param {
    pub fn new(rho: Vec3, phi: Vec3) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Layout `[rho_x, rho_y, rho_z, phi_x, phi_y, phi_z]`.
    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            rho: Vec3::new(v[0], v[1], v[2]),
            phi: Vec3::new(v[3], v[4], v[5]),
        }
    }

    /// Additive update `xi' = xi + delta`, followed by canonicalization.
    pub fn apply_delta(&mut self, delta: &Vec6) {
        let mut v = self.to_vector();
        v += delta;
        *self = Self::from_vector(&v);
        self.canonicalize();
    }

    /// Wraps `phi` into the open ball `|phi| < pi` (same rotation).
    pub fn canonicalize(&mut self) {
        let theta = self.phi.norm();
        if theta >= PI {
            self.phi *= 1.0 - 2.0 * PI / theta;
        }
    }

    /// Parameter whose decoupled transform equals `t`.
    pub fn from_matrix(t: &Mat4) -> Self {
        let r: Mat3 = t.fixed_view::<3, 3>(0, 0).into_owned();
        let mut p = Self {
            rho: t.fixed_view::<3, 1>(0, 3).into_owned(),
            phi: so3_log(&r),
        };
        p.canonicalize();
        p
    }

    pub fn matrix(&self) -> Mat4 {
        se3_decoupled(self)
    }
}

fn compose(r: &Mat3, t: &Vec3) -> Mat4 {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Full SE(3) exponential: `[exp(phi), J(phi) rho; 0, 1]`.
pub fn se3_full_exp(xi: &Se3Param) -> Mat4 {
    compose(&so3_exp(&xi.phi), &(so3_left_jacobian(&xi.phi) * xi.rho))
}

/// Decoupled map: `[exp(phi), rho; 0, 1]`.
pub fn se3_decoupled(xi: &Se3Param) -> Mat4 {
    compose(&so3_exp(&xi.phi), &xi.rho)
}

pub fn rotation(t: &Mat4) -> Mat3 {
    t.fixed_view::<3, 3>(0, 0).into_owned()
}

pub fn translation(t: &Mat4) -> Vec3 {
    t.fixed_view::<3, 1>(0, 3).into_owned()
}

pub fn rigid(r: &Mat3, t: &Vec3) -> Mat4 {
    compose(r, t)
}

/// Inverse of a rigid transform, `[R^T, -R^T t]`.
pub fn invert_rigid(t: &Mat4) -> Mat4 {
    let rt = rotation(t).transpose();
    compose(&rt, &(-(rt * translation(t))))
}

pub fn transform_point(t: &Mat4, p: &Vec3) -> Vec3 {
    rotation(t) * p + translation(t)
}

/// Applies `t` to every point; normals are rotated, intensities carried.
pub fn transform_points(t: &Mat4, cloud: &PointCloud) -> PointCloud {
    let r = rotation(t);
    let tr = translation(t);
    PointCloud {
        points: cloud.points.iter().map(|p| r * p + tr).collect(),
        intensity: cloud.intensity.clone(),
        normals: cloud.normals.as_ref().map(|ns| ns.iter().map(|n| r * n).collect()),
    }
}

/// Ordered list of `(frame_id, pose)` with strictly increasing ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    frames: Vec<(u32, Mat4)>,
}

impl Trajectory {
    pub fn new(frames: Vec<(u32, Mat4)>) -> Result<Self, GeometryError> {
        for w in frames.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "frame ids not strictly increasing at {} -> {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self { frames })
    }

    /// Frames numbered `0..poses.len()`.
    pub fn from_poses(poses: Vec<Mat4>) -> Self {
        Self {
            frames: poses.into_iter().enumerate().map(|(i, p)| (i as u32, p)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[(u32, Mat4)] {
        &self.frames
    }

    pub fn ids(&self) -> Vec<u32> {
        self.frames.iter().map(|f| f.0).collect()
    }

    pub fn poses(&self) -> Vec<Mat4> {
        self.frames.iter().map(|f| f.1).collect()
    }

    pub fn pose(&self, id: u32) -> Option<&Mat4> {
        self.frames
            .binary_search_by_key(&id, |f| f.0)
            .ok()
            .map(|i| &self.frames[i].1)
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.frames.iter().map(|f| translation(&f.1)).collect()
    }

    /// Keeps only the frames whose id is in `ids`.
    pub fn restrict_to(&self, ids: &[u32]) -> Self {
        Self {
            frames: self.frames.iter().filter(|f| ids.contains(&f.0)).cloned().collect(),
        }
    }

    /// Left-multiplies every pose by `g`.
    pub fn transformed(&self, g: &Mat4) -> Self {
        Self {
            frames: self.frames.iter().map(|(i, p)| (*i, g * p)).collect(),
        }
    }
}

/// Least-squares similarity `dst ~ s R src + t` (Umeyama). Fails when the
/// cross-covariance has rank < 2, i.e. the solution is not unique.
pub fn fit_similarity(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<(Mat3, Vec3, f64), GeometryError> {
    let n = src.len();
    if n != dst.len() {
        return Err(GeometryError::FrameMismatch(format!("{} vs {} points", n, dst.len())));
    }
    if n < 3 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "{n} positions, need at least 3"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vec3>() * inv_n;
    let mu_d = dst.iter().sum::<Vec3>() * inv_n;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s - mu_s;
        cov += (d - mu_d) * a.transpose();
        var_s += a.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    let svd = cov.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 1e-24 || sv[1] <= 1e-12 * sv[0] {
        return Err(GeometryError::DegenerateConfiguration(
            "points are collinear or coincident".into(),
        ));
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s_diag = Mat3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_diag[(2, 2)] = -1.0;
    }
    let r = u * s_diag * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s_diag[(0, 0)] + d[1] * s_diag[(1, 1)] + d[2] * s_diag[(2, 2)]) / var_s
    } else {
        1.0
    };
    Ok((r, mu_d - scale * r * mu_s, scale))
}

/// Result of [`align_trajectory`].
#[derive(Debug, Clone)]
pub struct Alignment {
    pub aligned: Trajectory,
    /// Similarity mapping estimate positions onto the reference: `x -> s R x + t`.
    pub transform: Mat4,
    pub scale: f64,
    /// Sum of squared position residuals after alignment.
    pub residual: f64,
}

/// Closed-form least-squares alignment of the estimate's positions onto the
/// reference (Umeyama). With `with_scale == false` the scale is fixed to 1.
pub fn align_trajectory(
    estimate: &Trajectory,
    reference: &Trajectory,
    with_scale: bool,
) -> Result<Alignment, GeometryError> {
    if estimate.ids() != reference.ids() {
        return Err(GeometryError::FrameMismatch(format!(
            "estimate has {} frames, reference has {}",
            estimate.len(),
            reference.len()
        )));
    }
    let src = estimate.positions();
    let dst = reference.positions();
    let (r, t, scale) = fit_similarity(&src, &dst, with_scale)?;

    let mut transform = compose(&(scale * r), &t);
    transform[(3, 3)] = 1.0;
    let aligned = Trajectory {
        frames: estimate
            .frames
            .iter()
            .map(|(id, p)| {
                let rot = r * rotation(p);
                let pos = scale * (r * translation(p)) + t;
                (*id, compose(&rot, &pos))
            })
            .collect(),
    };
    let residual = aligned
        .positions()
        .iter()
        .zip(&dst)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(Alignment {
        aligned,
        transform,
        scale,
        residual,
    })
}
