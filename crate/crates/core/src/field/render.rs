//! Ray sampling, alpha compositing and the per-ray reverse pass.

use super::encoding::in_domain;
use super::{sigmoid, FieldError, FieldParams};
use crate::geometry::{rotation, so3_left_jacobian, translation, Mat4, Se3Param, Vec3, Vec6};
use crate::range_image::ScannerConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// Ray through the center of pixel `(row, col)` for a sensor at `pose`.
pub fn ray_from_pixel(row: usize, col: usize, scanner: &ScannerConfig, pose: &Mat4, t_near: f64, t_far: f64) -> Ray {
    Ray {
        origin: translation(pose),
        direction: rotation(pose) * scanner.direction(row, col),
        t_near,
        t_far,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub num_samples: usize,
    /// Coarse-to-fine progress; `None` leaves all levels on.
    pub alpha: Option<f64>,
    /// Stop marching once transmittance drops below this (0 disables).
    pub early_stop: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { num_samples: 64, alpha: None, early_stop: 0.0 }
    }
}

/// Per-sample activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct RayTape {
    /// Sample index and clamped position of every evaluated sample.
    samples: Vec<(usize, Vec3)>,
    acts: Vec<f64>,
    alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub ray: Ray,
    pub depth: f64,
    pub intensity: f64,
    pub raydrop_prob: f64,
    pub drop_logit: f64,
    pub z: Vec<f64>,
    pub deltas: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sample_intensity: Vec<f64>,
    pub sample_logit: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance after each sample, `T_{i+1}`.
    pub trans_after: Vec<f64>,
    pub tape: Option<RayTape>,
}

/// Alpha-compositing weights `w_i = T_i (1 - exp(-sigma_i delta_i))` and the
/// transmittance after each sample.
pub fn composite(sigma: &[f64], deltas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(sigma.len());
    let mut after = Vec::with_capacity(sigma.len());
    for (s, d) in sigma.iter().zip(deltas) {
        let e = (-s * d).exp();
        w.push(t * (1.0 - e));
        t *= e;
        after.push(t);
    }
    (w, after)
}

/// Sample distances: cell midpoints, or `jitter[i]` in [0,1) within cell `i`.
pub fn sample_distances(ray: &Ray, n: usize, jitter: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let step = (ray.t_far - ray.t_near) / n as f64;
    let z: Vec<f64> = (0..n)
        .map(|i| ray.t_near + (i as f64 + jitter.map_or(0.5, |j| j[i])) * step)
        .collect();
    let deltas = (0..n).map(|i| if i + 1 < n { z[i + 1] - z[i] } else { ray.t_far - z[i] }).collect();
    (z, deltas)
}

pub fn render_ray(params: &FieldParams, ray: &Ray, opts: &RenderOptions, jitter: Option<&[f64]>, record: bool) -> RenderOutput {
    let n = opts.num_samples;
    let (z, deltas) = sample_distances(ray, n, jitter);
    let act_len = params.act_len();
    let mut act = vec![0.0; act_len];
    let mut sigma = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut l = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut trans_after = vec![0.0; n];
    let mut tape = record.then(|| RayTape { samples: Vec::new(), acts: Vec::new(), alpha: opts.alpha });
    let mut t = 1.0;
    let mut stop = n;
    for i in 0..n {
        if t < opts.early_stop {
            stop = i;
            break;
        }
        let x = ray.origin + z[i] * ray.direction;
        if in_domain(&x) {
            let x = x.map(|v| v.clamp(0.0, 1.0));
            let out = params.forward_sample(&x, opts.alpha, &mut act);
            sigma[i] = out.sigma;
            s[i] = out.intensity;
            l[i] = out.drop_logit;
            if let Some(tp) = tape.as_mut() {
                tp.samples.push((i, x));
                tp.acts.extend_from_slice(&act);
            }
        }
        let e = (-sigma[i] * deltas[i]).exp();
        weights[i] = t * (1.0 - e);
        t *= e;
        trans_after[i] = t;
    }
    for v in &mut trans_after[stop..] {
        *v = t;
    }
    let depth = weights.iter().zip(&z).map(|(w, z)| w * z).sum();
    let intensity = weights.iter().zip(&s).map(|(w, v)| w * v).sum();
    let drop_logit: f64 = weights.iter().zip(&l).map(|(w, v)| w * v).sum();
    RenderOutput {
        ray: *ray,
        depth,
        intensity,
        raydrop_prob: sigmoid(drop_logit),
        drop_logit,
        z,
        deltas,
        sigma,
        sample_intensity: s,
        sample_logit: l,
        weights,
        trans_after,
        tape,
    }
}

/// Gradients of a scalar loss w.r.t. the three rendered outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Upstream {
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
}

/// Gradient w.r.t. the ray origin and (world) direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayGradient {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// Field-gradient accumulator: dense over the MLP block, sparse over the
/// encoding tables.
#[derive(Debug, Clone)]
pub struct FieldGrad {
    pub mlp: Vec<f64>,
    pub sparse: Vec<(u32, f64)>,
}

impl FieldGrad {
    pub fn new(params: &FieldParams) -> Self {
        Self { mlp: vec![0.0; params.mlp_range().len()], sparse: Vec::new() }
    }

    /// Adds `scale` times the accumulated gradient into a full-length buffer.
    pub fn apply(&self, grads: &mut [f64], mlp_offset: usize, scale: f64) {
        for (i, v) in &self.sparse {
            grads[*i as usize] += scale * v;
        }
        for (g, v) in grads[mlp_offset..].iter_mut().zip(&self.mlp) {
            *g += scale * v;
        }
    }
}

/// Reverse pass of [`render_ray`]: accumulates field gradients into `sink`
/// and returns the gradient w.r.t. the ray.
pub fn backward(params: &FieldParams, out: &RenderOutput, up: &Upstream, sink: &mut FieldGrad) -> Result<RayGradient, FieldError> {
    let tape = out.tape.as_ref().ok_or(FieldError::TapeMissing)?;
    let mut rg = RayGradient { origin: Vec3::zeros(), direction: Vec3::zeros() };
    if up.depth == 0.0 && up.intensity == 0.0 && up.raydrop == 0.0 {
        return Ok(rg);
    }
    let p = out.raydrop_prob;
    let g_logit = up.raydrop * p * (1.0 - p);
    let n = out.z.len();
    // combined per-sample value whose weighted sum is differentiated
    let c: Vec<f64> = (0..n)
        .map(|i| up.depth * out.z[i] + up.intensity * out.sample_intensity[i] + g_logit * out.sample_logit[i])
        .collect();
    // suffix[i] = sum_{j > i} w_j c_j
    let mut suffix = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        suffix[i] = acc;
        acc += out.weights[i] * c[i];
    }
    let act_len = params.act_len();
    for (k, (i, x)) in tape.samples.iter().enumerate() {
        let i = *i;
        let d_sigma = out.deltas[i] * (out.trans_after[i] * c[i] - suffix[i]);
        let d = [d_sigma, up.intensity * out.weights[i], g_logit * out.weights[i]];
        if d.iter().all(|v| *v == 0.0) {
            continue;
        }
        let act = &tape.acts[k * act_len..(k + 1) * act_len];
        let gx = params.backward_sample(x, tape.alpha, act, d, &mut sink.mlp, &mut sink.sparse);
        rg.origin += gx;
        rg.direction += out.z[i] * gx;
    }
    Ok(rg)
}

/// Chains a ray gradient to the frame's pose parameters `[rho; phi]` for a
/// ray with sensor-frame direction `sensor_dir`.
pub fn pose_gradient(xi: &Se3Param, sensor_dir: &Vec3, rg: &RayGradient) -> Vec6 {
    let rd = xi.matrix().fixed_view::<3, 3>(0, 0) * sensor_dir;
    let g_phi = so3_left_jacobian(&xi.phi).transpose() * rd.cross(&rg.direction);
    let mut g = Vec6::zeros();
    g.fixed_rows_mut::<3>(0).copy_from(&rg.origin);
    g.fixed_rows_mut::<3>(3).copy_from(&g_phi);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, ParamClass};

    #[test]
    fn opaque_single_sample() {
        let (w, _) = composite(&[1e6], &[1.0]);
        assert_eq!(w, vec![1.0]);
        let depth: f64 = w.iter().zip(&[5.0]).map(|(a, b)| a * b).sum();
        assert_eq!(depth, 5.0);
    }

    #[test]
    fn transparent_field() {
        let (w, after) = composite(&[0.0; 8], &[0.1; 8]);
        assert!(w.iter().all(|v| *v == 0.0));
        assert!(after.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn two_samples_ln2() {
        let ln2 = std::f64::consts::LN_2;
        let (w, _) = composite(&[ln2, ln2], &[1.0, 1.0]);
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert!((w[1] - 0.25).abs() < 1e-15);
        let depth = w[0] * 1.0 + w[1] * 2.0;
        assert!((depth - 1.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_samples_and_last_delta() {
        let ray = Ray { origin: Vec3::zeros(), direction: Vec3::x(), t_near: 1.0, t_far: 2.0 };
        let (z, d) = sample_distances(&ray, 4, None);
        assert_eq!(z, vec![1.125, 1.375, 1.625, 1.875]);
        assert_eq!(d, vec![0.25, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn pixel_rays() {
        let sc = ScannerConfig { height: 4, width: 8, fov_up_deg: 10.0, fov_down_deg: -10.0, ..Default::default() };
        let id = Mat4::identity();
        // rows 1 and 2 straddle zero elevation symmetrically
        let a = ray_from_pixel(1, 3, &sc, &id, 0.0, 1.0);
        let b = ray_from_pixel(2, 3, &sc, &id, 0.0, 1.0);
        assert!((a.direction.z + b.direction.z).abs() < 1e-15);
        assert!(a.direction.z > b.direction.z);
        let theta = sc.azimuth(3);
        let xy = Vec3::new(a.direction.x, a.direction.y, 0.0).normalize();
        assert!((xy - Vec3::new(theta.cos(), theta.sin(), 0.0)).norm() < 1e-12);
        assert!((a.direction.norm() - 1.0).abs() < 1e-12);
        let pose = Se3Param::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 0.5)).matrix();
        let r = ray_from_pixel(0, 0, &sc, &pose, 0.0, 1.0);
        assert_eq!(r.origin, Vec3::new(0.1, 0.2, 0.3));
        assert!((r.direction.norm() - 1.0).abs() < 1e-12);
    }

    fn toy_params() -> FieldParams {
        let mut cfg = FieldConfig::default();
        cfg.density_scale = 5.0;
        let mut p = FieldParams::init(cfg, 11).unwrap();
        // give the tables some structure so gradients are not tiny
        let planar = p.layout.planar_params.clone();
        for (k, v) in p.values[p.layout.hash_params.clone()].iter_mut().enumerate() {
            *v = ((k as f64) * 0.7).sin() * 0.5;
        }
        for (k, v) in p.values[planar].iter_mut().enumerate() {
            *v = 0.8 + 0.3 * ((k as f64) * 1.3).cos();
        }
        let last = p.values.len();
        p.values[last - 3] = 0.5;
        p
    }

    #[test]
    fn weights_bounded_and_deterministic() {
        let p = toy_params();
        let opts = RenderOptions { num_samples: 32, alpha: Some(3.7), early_stop: 0.0 };
        for k in 0..20 {
            let a = k as f64 * 0.3;
            let ray = Ray {
                origin: Vec3::new(0.5, 0.5, 0.5),
                direction: Vec3::new(a.cos(), a.sin(), 0.1).normalize(),
                t_near: 0.01,
                t_far: 0.6,
            };
            let o = render_ray(&p, &ray, &opts, None, false);
            let sum: f64 = o.weights.iter().sum();
            assert!(o.weights.iter().all(|w| *w >= 0.0));
            assert!((sum - (1.0 - o.trans_after[31])).abs() < 1e-12);
            assert!(sum <= 1.0 + 1e-9);
            let o2 = render_ray(&p, &ray, &opts, None, true);
            assert_eq!(o.depth.to_bits(), o2.depth.to_bits());
        }
    }

    #[test]
    fn tape_required_and_zero_upstream() {
        let p = toy_params();
        let ray = Ray { origin: Vec3::new(0.5, 0.5, 0.5), direction: Vec3::x(), t_near: 0.01, t_far: 0.4 };
        let o = render_ray(&p, &ray, &RenderOptions::default(), None, false);
        let mut sink = FieldGrad::new(&p);
        assert_eq!(backward(&p, &o, &Upstream::default(), &mut sink).unwrap_err(), FieldError::TapeMissing);
        let o = render_ray(&p, &ray, &RenderOptions::default(), None, true);
        let g = backward(&p, &o, &Upstream::default(), &mut sink).unwrap();
        assert_eq!(g.origin, Vec3::zeros());
        assert!(sink.mlp.iter().all(|v| *v == 0.0));
        assert!(sink.sparse.is_empty());
    }

    /// Scalar loss over two frames' rays, as a function of field values and poses.
    fn toy_loss(p: &FieldParams, poses: &[Se3Param], dirs: &[Vec3], opts: &RenderOptions, up: &Upstream) -> f64 {
        let mut total = 0.0;
        for xi in poses {
            let m = xi.matrix();
            for d in dirs {
                let ray = Ray { origin: translation(&m), direction: rotation(&m) * d, t_near: 0.02, t_far: 0.45 };
                let o = render_ray(p, &ray, opts, None, false);
                total += up.depth * o.depth + up.intensity * o.intensity + up.raydrop * o.raydrop_prob;
            }
        }
        total
    }

    #[test]
    fn depth_gradient_single_entries() {
        let p = toy_params();
        let xi = Se3Param::new(Vec3::new(0.5, 0.47, 0.51), Vec3::new(0.0, 0.0, 0.3));
        let d = Vec3::new(0.8, 0.55, 0.1).normalize();
        let opts = RenderOptions { num_samples: 32, alpha: None, early_stop: 0.0 };
        let depth = |p: &FieldParams, xi: &Se3Param| {
            let m = xi.matrix();
            let ray = Ray { origin: translation(&m), direction: rotation(&m) * d, t_near: 0.02, t_far: 0.45 };
            render_ray(p, &ray, &opts, None, false).depth
        };
        let m = xi.matrix();
        let ray = Ray { origin: translation(&m), direction: rotation(&m) * d, t_near: 0.02, t_far: 0.45 };
        let o = render_ray(&p, &ray, &opts, None, true);
        let mut sink = FieldGrad::new(&p);
        let rg = backward(&p, &o, &Upstream { depth: 1.0, ..Default::default() }, &mut sink).unwrap();
        let mut grads = vec![0.0; p.len()];
        sink.apply(&mut grads, p.mlp_range().start, 1.0);
        let (idx, an) = grads[p.layout.hash_params.clone()]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, v)| (i, *v))
            .unwrap();
        let h = 1e-4;
        let mut q = p.clone();
        q.values[idx] += h;
        let fp = depth(&q, &xi);
        q.values[idx] -= 2.0 * h;
        let fd = (fp - depth(&q, &xi)) / (2.0 * h);
        assert!((an - fd).abs() / fd.abs() < 1e-4, "{an} vs {fd}");

        // grid interpolation is piecewise linear in position, so pose steps
        // must stay well inside one cell
        let h = 1e-7;
        let g = pose_gradient(&xi, &d, &rg);
        for k in 0..3 {
            let mut dv = Vec6::zeros();
            dv[k] = h;
            let fp = depth(&p, &Se3Param::from_vector(&(xi.to_vector() + dv)));
            let fm = depth(&p, &Se3Param::from_vector(&(xi.to_vector() - dv)));
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[k] - fd).abs() / fd.abs().max(1e-3) < 1e-4, "rho{k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn full_gradient_check() {
        let p = toy_params();
        let poses = [
            Se3Param::new(Vec3::new(0.5, 0.48, 0.52), Vec3::new(0.02, -0.03, 0.4)),
            Se3Param::new(Vec3::new(0.46, 0.55, 0.5), Vec3::new(-0.05, 0.01, 1.1)),
        ];
        let dirs: Vec<Vec3> = (0..6)
            .map(|k| {
                let a = k as f64 * 1.05;
                Vec3::new(a.cos(), a.sin(), 0.2 * (k as f64 - 2.5) / 2.5).normalize()
            })
            .collect();
        let opts = RenderOptions { num_samples: 24, alpha: Some(4.6), early_stop: 0.0 };
        let up = Upstream { depth: 1.3, intensity: -0.8, raydrop: 0.6 };

        let mut sink = FieldGrad::new(&p);
        let mut pose_grads = [Vec6::zeros(); 2];
        for (f, xi) in poses.iter().enumerate() {
            let m = xi.matrix();
            for d in &dirs {
                let ray = Ray { origin: translation(&m), direction: rotation(&m) * d, t_near: 0.02, t_far: 0.45 };
                let o = render_ray(&p, &ray, &opts, None, true);
                let rg = backward(&p, &o, &up, &mut sink).unwrap();
                pose_grads[f] += pose_gradient(xi, d, &rg);
            }
        }
        let mut grads = vec![0.0; p.len()];
        sink.apply(&mut grads, p.mlp_range().start, 1.0);

        let check = |an: f64, fd: f64, what: &str| {
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: analytic {an} fd {fd}");
        };
        let h = 1e-6;
        let mut checked = [0usize; 3];
        for i in 0..p.len() {
            if grads[i].abs() < 1e-5 {
                continue;
            }
            let class = p.class_of(i) as usize;
            if checked[class] >= 40 || i % 3 != 0 {
                continue;
            }
            checked[class] += 1;
            let mut q = p.clone();
            q.values[i] += h;
            let fp = toy_loss(&q, &poses, &dirs, &opts, &up);
            q.values[i] -= 2.0 * h;
            let fm = toy_loss(&q, &poses, &dirs, &opts, &up);
            check(grads[i], (fp - fm) / (2.0 * h), &format!("{:?} param {i}", p.class_of(i)));
        }
        assert!(checked.iter().all(|c| *c > 10), "{checked:?}");
        let _ = ParamClass::Mlp;

        let h = 1e-7;
        for f in 0..2 {
            for k in 0..6 {
                let mut plus = poses;
                let mut minus = poses;
                let mut dv = Vec6::zeros();
                dv[k] = h;
                plus[f] = Se3Param::from_vector(&(poses[f].to_vector() + dv));
                minus[f] = Se3Param::from_vector(&(poses[f].to_vector() - dv));
                let fd = (toy_loss(&p, &plus, &dirs, &opts, &up) - toy_loss(&p, &minus, &dirs, &opts, &up)) / (2.0 * h);
                check(pose_grads[f][k], fd, &format!("frame {f} pose {k}"));
            }
        }
    }
}
