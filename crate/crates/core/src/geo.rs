//! Pure geometric pose optimization over a temporal frame graph.
//!
//! Every edge `(i, j)` of the graph contributes a robust Chamfer term between
//! the two frames' clouds placed in the world by their current poses. Each
//! correspondence is weighted by a softmax over clipped inverse distances,
//! `w_i = exp(t / max(voxel, d_i)) / sum_j exp(t / max(voxel, d_j))`, so that a
//! growing temperature `t` concentrates the loss on close (overlapping)
//! correspondences. The graph loss is the mean over edges and is
//! differentiated analytically with respect to every frame's `[rho; phi]`.
//!
//! Within one evaluation the nearest-neighbour pairing is fixed, and by
//! default the weights too; both are recomputed at every step.

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{
    fit_similarity, invert_rigid, rigid, rotation, so3_exp, so3_left_jacobian, translation, GeometryError,
    Mat4, Se3Param, Vec3, Vec6,
};
use crate::optim::AdamState;
use crate::spatial::{voxel_downsample, KdTree, SpatialError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("graph window must be >= 1")]
    InvalidWindow,
    #[error("weight list is empty")]
    EmptyList,
    #[error("frame {frame}: point cloud is empty")]
    EmptyCloud { frame: usize },
    #[error("expected {expected} {what}, got {got}")]
    CountMismatch { what: &'static str, expected: usize, got: usize },
    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<SpatialError> for GeoError {
    fn from(e: SpatialError) -> Self {
        match e {
            SpatialError::EmptyCloud => GeoError::EmptyCloud { frame: 0 },
            other => GeoError::InvalidConfig(other.to_string()),
        }
    }
}

/// Edges connect every frame to its next `window` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph {
    pub num_frames: usize,
    pub window: usize,
    /// Sorted lexicographically, `0 < j - i <= window`.
    pub edges: Vec<(usize, usize)>,
}

/// `n M - n (n + 1) / 2`, the edge count for `n < M`.
pub fn expected_edge_count(num_frames: usize, window: usize) -> usize {
    window * num_frames - window * (window + 1) / 2
}

pub fn build_graph(num_frames: usize, window: usize) -> Result<FrameGraph, GeoError> {
    if num_frames < 2 {
        return Err(GeoError::TooFewFrames(num_frames));
    }
    if window == 0 {
        return Err(GeoError::InvalidWindow);
    }
    let window = if window >= num_frames {
        warn!("graph window {window} >= frame count {num_frames}, clamping to {}", num_frames - 1);
        num_frames - 1
    } else {
        window
    };
    let mut edges = Vec::with_capacity(expected_edge_count(num_frames, window));
    for i in 0..num_frames {
        for j in (i + 1)..=(i + window).min(num_frames - 1) {
            edges.push((i, j));
        }
    }
    Ok(FrameGraph { num_frames, window, edges })
}

impl FrameGraph {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperatureSchedule {
    Linear,
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcdConfig {
    /// Temperature reached at the end of the schedule.
    pub t0: f64,
    pub schedule: TemperatureSchedule,
    /// Downsampling voxel, also the lower clip of distances inside the weights.
    pub voxel_size: f64,
    /// Hold weights constant during differentiation.
    pub detach_weights: bool,
}

impl Default for RcdConfig {
    fn default() -> Self {
        Self {
            t0: 0.5,
            schedule: TemperatureSchedule::Linear,
            voxel_size: 0.01,
            detach_weights: true,
        }
    }
}

impl RcdConfig {
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.t0 >= 0.0) {
            return Err(GeoError::InvalidConfig(format!("t0 must be >= 0, got {}", self.t0)));
        }
        if !(self.voxel_size > 0.0) {
            return Err(GeoError::InvalidConfig(format!("voxel_size must be > 0, got {}", self.voxel_size)));
        }
        Ok(())
    }
}

/// Temperature at training progress in `[0, 1]`.
pub fn temperature_at(progress: f64, cfg: &RcdConfig) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    match cfg.schedule {
        TemperatureSchedule::Linear => cfg.t0 * p,
        TemperatureSchedule::Exponential => cfg.t0 * ((p * std::f64::consts::LN_2).exp() - 1.0),
    }
}

/// Softmax of `t / max(voxel, d)`, computed with a max shift.
pub fn correspondence_weights(distances: &[f64], t: f64, voxel_size: f64) -> Result<Vec<f64>, GeoError> {
    if distances.is_empty() {
        return Err(GeoError::EmptyList);
    }
    let mut w: Vec<f64> = distances.iter().map(|&d| t / d.max(voxel_size)).collect();
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in w.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in w.iter_mut() {
        *x /= sum;
    }
    Ok(w)
}

/// Loss and pose gradients of one edge. Gradients use the `[rho; phi]` layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeResult {
    pub loss: f64,
    pub grad_p: Vec6,
    pub grad_q: Vec6,
}

/// Nearest-neighbour pairing (and weights) for one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePairing {
    /// For every point of P, the index of its partner in Q.
    pub forward: Vec<usize>,
    pub forward_weights: Vec<f64>,
    /// For every point of Q, the index of its partner in P.
    pub backward: Vec<usize>,
    pub backward_weights: Vec<f64>,
}

/// Point set with a k-d tree over its local (sensor-frame) coordinates.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub points: Vec<Vec3>,
    tree: KdTree,
}

impl PreparedCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, SpatialError> {
        let tree = KdTree::from_points(&points)?;
        Ok(Self { points, tree })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// For every point of `src` placed by `t_src`, the nearest point of `dst`
/// placed by `t_dst`, as `(index, distance)`. Queries run in `dst`'s local frame.
fn nearest_pairs(src: &PreparedCloud, t_src: &Mat4, dst: &PreparedCloud, t_dst: &Mat4) -> (Vec<usize>, Vec<f64>) {
    let rel = invert_rigid(t_dst) * t_src;
    let r = rotation(&rel);
    let t = translation(&rel);
    src.points
        .iter()
        .map(|p| dst.tree.nearest(&(r * p + t)))
        .unzip()
}

pub fn pair_edge(p: &PreparedCloud, q: &PreparedCloud, xi_p: &Se3Param, xi_q: &Se3Param, cfg: &RcdConfig, t: f64) -> EdgePairing {
    let tp = xi_p.matrix();
    let tq = xi_q.matrix();
    let (forward, df) = nearest_pairs(p, &tp, q, &tq);
    let (backward, db) = nearest_pairs(q, &tq, p, &tp);
    EdgePairing {
        forward_weights: correspondence_weights(&df, t, cfg.voxel_size).expect("non-empty cloud"),
        backward_weights: correspondence_weights(&db, t, cfg.voxel_size).expect("non-empty cloud"),
        forward,
        backward,
    }
}

/// One direction of the robust Chamfer term with a fixed pairing.
/// Returns `(loss, grad_src, grad_dst)`.
#[allow(clippy::too_many_arguments)]
fn directed_term(
    src: &[Vec3],
    xi_src: &Se3Param,
    dst: &[Vec3],
    xi_dst: &Se3Param,
    pairs: &[usize],
    frozen_weights: &[f64],
    cfg: &RcdConfig,
    t: f64,
) -> (f64, Vec6, Vec6) {
    let r_src = so3_exp(&xi_src.phi);
    let r_dst = so3_exp(&xi_dst.phi);
    let residuals: Vec<(Vec3, Vec3, Vec3)> = src
        .iter()
        .zip(pairs)
        .map(|(s, &j)| {
            let a = r_src * s;
            let b = r_dst * dst[j];
            (a + xi_src.rho - b - xi_dst.rho, a, b)
        })
        .collect();

    let live_weights;
    let weights: &[f64] = if cfg.detach_weights {
        frozen_weights
    } else {
        let d: Vec<f64> = residuals.iter().map(|r| r.0.norm()).collect();
        live_weights = correspondence_weights(&d, t, cfg.voxel_size).expect("non-empty cloud");
        &live_weights
    };

    let loss: f64 = residuals.iter().zip(weights).map(|((r, _, _), w)| w * r.norm_squared()).sum();

    let mut g_rho = Vec3::zeros();
    let mut g_src_rot = Vec3::zeros();
    let mut g_dst_rot = Vec3::zeros();
    for ((r, a, b), &w) in residuals.iter().zip(weights) {
        let mut g = 2.0 * w * r;
        if !cfg.detach_weights {
            let d = r.norm();
            if d > cfg.voxel_size {
                // d/dd of sum_k w_k d_k^2 through the softmax scores t / d
                let coeff = w * (d * d - loss) * (-t / (d * d)) / d;
                g += coeff * r;
            }
        }
        g_rho += g;
        g_src_rot += a.cross(&g);
        g_dst_rot += b.cross(&g);
    }
    let g_src_phi = so3_left_jacobian(&xi_src.phi).transpose() * g_src_rot;
    let g_dst_phi = so3_left_jacobian(&xi_dst.phi).transpose() * g_dst_rot;
    let grad_src = Vec6::new(g_rho.x, g_rho.y, g_rho.z, g_src_phi.x, g_src_phi.y, g_src_phi.z);
    let grad_dst = -Vec6::new(g_rho.x, g_rho.y, g_rho.z, g_dst_phi.x, g_dst_phi.y, g_dst_phi.z);
    (loss, grad_src, grad_dst)
}

/// Edge loss and gradients for a fixed pairing.
pub fn edge_loss_with_pairing(
    p: &[Vec3],
    q: &[Vec3],
    xi_p: &Se3Param,
    xi_q: &Se3Param,
    pairing: &EdgePairing,
    cfg: &RcdConfig,
    t: f64,
) -> EdgeResult {
    let (lf, gp1, gq1) = directed_term(p, xi_p, q, xi_q, &pairing.forward, &pairing.forward_weights, cfg, t);
    let (lb, gq2, gp2) = directed_term(q, xi_q, p, xi_p, &pairing.backward, &pairing.backward_weights, cfg, t);
    EdgeResult {
        loss: lf + lb,
        grad_p: gp1 + gp2,
        grad_q: gq1 + gq2,
    }
}

/// Robust Chamfer distance between two clouds under their world poses, with
/// analytic gradients for the fixed-correspondence surrogate.
pub fn robust_chamfer(
    p: &PointCloud,
    q: &PointCloud,
    xi_p: &Se3Param,
    xi_q: &Se3Param,
    cfg: &RcdConfig,
    t: f64,
) -> Result<EdgeResult, GeoError> {
    if p.is_empty() {
        return Err(GeoError::EmptyCloud { frame: 0 });
    }
    if q.is_empty() {
        return Err(GeoError::EmptyCloud { frame: 1 });
    }
    let pp = PreparedCloud::new(p.points.clone())?;
    let qq = PreparedCloud::new(q.points.clone())?;
    let pairing = pair_edge(&pp, &qq, xi_p, xi_q, cfg, t);
    Ok(edge_loss_with_pairing(&pp.points, &qq.points, xi_p, xi_q, &pairing, cfg, t))
}

/// Clouds, trees and graph of a multi-frame registration problem.
#[derive(Debug, Clone)]
pub struct GeoProblem {
    pub clouds: Vec<PreparedCloud>,
    pub graph: FrameGraph,
}

impl GeoProblem {
    /// Uses the clouds as given (no downsampling).
    pub fn new(clouds: &[PointCloud], graph: FrameGraph) -> Result<Self, GeoError> {
        if clouds.len() != graph.num_frames {
            return Err(GeoError::CountMismatch { what: "clouds", expected: graph.num_frames, got: clouds.len() });
        }
        let clouds = clouds
            .iter()
            .enumerate()
            .map(|(i, c)| PreparedCloud::new(c.points.clone()).map_err(|_| GeoError::EmptyCloud { frame: i }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { clouds, graph })
    }

    /// Voxel-downsamples every cloud once, then prepares the trees.
    pub fn downsampled(clouds: &[PointCloud], graph: FrameGraph, voxel_size: f64) -> Result<Self, GeoError> {
        let reduced = clouds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.is_empty() {
                    return Err(GeoError::EmptyCloud { frame: i });
                }
                Ok(voxel_downsample(c, voxel_size)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(&reduced, graph)
    }

    fn check_poses(&self, poses: &[Se3Param]) -> Result<(), GeoError> {
        if poses.len() != self.graph.num_frames {
            return Err(GeoError::CountMismatch { what: "poses", expected: self.graph.num_frames, got: poses.len() });
        }
        Ok(())
    }

    /// Pairings for every edge, in edge order.
    pub fn pairings(&self, poses: &[Se3Param], cfg: &RcdConfig, t: f64) -> Result<Vec<EdgePairing>, GeoError> {
        self.check_poses(poses)?;
        Ok(self
            .graph
            .edges
            .par_iter()
            .map(|&(i, j)| pair_edge(&self.clouds[i], &self.clouds[j], &poses[i], &poses[j], cfg, t))
            .collect())
    }

    /// Graph loss and per-frame gradients for fixed pairings. Edge results are
    /// reduced in edge order so the sums do not depend on the thread count.
    pub fn loss_with_pairings(
        &self,
        poses: &[Se3Param],
        pairings: &[EdgePairing],
        cfg: &RcdConfig,
        t: f64,
    ) -> Result<(f64, Vec<Vec6>), GeoError> {
        self.check_poses(poses)?;
        let per_edge: Vec<EdgeResult> = self
            .graph
            .edges
            .par_iter()
            .zip(pairings.par_iter())
            .map(|(&(i, j), pairing)| {
                edge_loss_with_pairing(&self.clouds[i].points, &self.clouds[j].points, &poses[i], &poses[j], pairing, cfg, t)
            })
            .collect();
        let denom = self.graph.edge_count() as f64;
        let mut loss = 0.0;
        let mut grads = vec![Vec6::zeros(); poses.len()];
        for (&(i, j), e) in self.graph.edges.iter().zip(&per_edge) {
            loss += e.loss;
            grads[i] += e.grad_p;
            grads[j] += e.grad_q;
        }
        for g in grads.iter_mut() {
            *g /= denom;
        }
        Ok((loss / denom, grads))
    }

    pub fn evaluate(&self, poses: &[Se3Param], cfg: &RcdConfig, t: f64) -> Result<(f64, Vec<Vec6>), GeoError> {
        let pairings = self.pairings(poses, cfg, t)?;
        self.loss_with_pairings(poses, &pairings, cfg, t)
    }
}

/// Graph-based robust Chamfer loss over all edges, normalized by the edge count.
pub fn graph_loss(
    clouds: &[PointCloud],
    poses: &[Se3Param],
    graph: &FrameGraph,
    cfg: &RcdConfig,
    t: f64,
) -> Result<(f64, Vec<Vec6>), GeoError> {
    GeoProblem::new(clouds, graph.clone())?.evaluate(poses, cfg, t)
}

/// Per-frame Adam states over `[rho; phi]`.
#[derive(Debug, Clone)]
pub struct PoseOptimizer {
    pub states: Vec<AdamState>,
}

impl PoseOptimizer {
    pub fn new(num_frames: usize) -> Self {
        Self { states: (0..num_frames).map(|_| AdamState::new(6)).collect() }
    }

    /// Adam step on one frame; rho uses `lr_trans`, phi uses `lr_rot`.
    pub fn step_frame(&mut self, frame: usize, pose: &mut Se3Param, grad: &Vec6, lr_trans: f64, lr_rot: f64) {
        let mut v = pose.to_vector();
        self.states[frame].update(v.as_mut_slice(), grad.as_slice(), |i| if i < 3 { lr_trans } else { lr_rot });
        *pose = Se3Param::from_vector(&v);
        pose.canonicalize();
    }
}

/// One full-graph descent step. Frames flagged in `fixed` are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn geo_step(
    problem: &GeoProblem,
    poses: &mut [Se3Param],
    optimizer: &mut PoseOptimizer,
    fixed: &[bool],
    cfg: &RcdConfig,
    t: f64,
    lr_trans: f64,
    lr_rot: f64,
) -> Result<f64, GeoError> {
    let (loss, grads) = problem.evaluate(poses, cfg, t)?;
    for (k, (pose, g)) in poses.iter_mut().zip(&grads).enumerate() {
        if fixed.get(k).copied().unwrap_or(false) {
            continue;
        }
        optimizer.step_frame(k, pose, g, lr_trans, lr_rot);
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct GeoRun {
    pub poses: Vec<Se3Param>,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

/// Stand-alone geometric registration: downsample once, then `steps` Adam
/// steps on the graph loss with frame 0 held fixed. The temperature follows
/// the configured schedule over the run.
pub fn geo_optimize(
    clouds: &[PointCloud],
    poses: &[Se3Param],
    graph: &FrameGraph,
    cfg: &RcdConfig,
    steps: usize,
    lr_rot: f64,
    lr_trans: f64,
) -> Result<GeoRun, GeoError> {
    cfg.validate()?;
    let problem = GeoProblem::downsampled(clouds, graph.clone(), cfg.voxel_size)?;
    let mut poses = poses.to_vec();
    problem.check_poses(&poses)?;
    let mut optimizer = PoseOptimizer::new(poses.len());
    let mut fixed = vec![false; poses.len()];
    fixed[0] = true;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let t = temperature_at(s as f64 / steps.max(1) as f64, cfg);
        losses.push(geo_step(&problem, &mut poses, &mut optimizer, &fixed, cfg, t, lr_trans, lr_rot)?);
    }
    Ok(GeoRun { poses, losses })
}

/// Point-to-point ICP from the identity; returns the transform mapping P into Q's frame.
pub fn icp_pairwise(p: &PointCloud, q: &PointCloud, max_iters: usize, tol: f64) -> Result<Mat4, GeoError> {
    icp_pairwise_with_init(p, q, &Mat4::identity(), max_iters, tol)
}

/// Point-to-point ICP: nearest correspondences, closed-form SVD solve, repeat
/// until the update is below `tol` (Frobenius norm of `dT - I`) or `max_iters`.
pub fn icp_pairwise_with_init(
    p: &PointCloud,
    q: &PointCloud,
    init: &Mat4,
    max_iters: usize,
    tol: f64,
) -> Result<Mat4, GeoError> {
    if p.len() < 3 || q.len() < 3 {
        return Err(GeoError::DegenerateCorrespondences(format!(
            "need >= 3 points per cloud, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let tree = KdTree::build(q)?;
    let mut current = *init;
    let mut matched = Vec::with_capacity(p.len());
    for _ in 0..max_iters {
        let r = rotation(&current);
        let t = translation(&current);
        matched.clear();
        matched.extend(p.points.iter().map(|x| q.points[tree.nearest(&(r * x + t)).0]));
        let (r_new, t_new, _) = fit_similarity(&p.points, &matched, false).map_err(|e| match e {
            GeometryError::DegenerateConfiguration(m) => GeoError::DegenerateCorrespondences(m),
            other => GeoError::DegenerateCorrespondences(other.to_string()),
        })?;
        let next = rigid(&r_new, &t_new);
        let delta = next * invert_rigid(&current);
        current = next;
        if (delta - Mat4::identity()).norm() < tol {
            break;
        }
    }
    Ok(current)
}

/// Odometry-style chaining of adjacent-frame ICP. Frame 0 keeps its initial
/// pose; each relative ICP starts from the initial trajectory's relative pose.
pub fn sequential_icp(clouds: &[PointCloud], init: &[Mat4], max_iters: usize, tol: f64) -> Result<Vec<Mat4>, GeoError> {
    if clouds.len() != init.len() {
        return Err(GeoError::CountMismatch { what: "poses", expected: clouds.len(), got: init.len() });
    }
    let mut out: Vec<Mat4> = Vec::with_capacity(init.len());
    if let Some(first) = init.first() {
        out.push(*first);
    }
    for k in 1..clouds.len() {
        let rel0 = invert_rigid(&init[k - 1]) * init[k];
        let rel = icp_pairwise_with_init(&clouds[k], &clouds[k - 1], &rel0, max_iters, tol)?;
        out.push(out[k - 1] * rel);
    }
    Ok(out)
}
