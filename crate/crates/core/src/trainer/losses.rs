//! 2D rendering loss and the 3D Chamfer / normal constraints between
//! synthesized and observed scans.

use super::TrainError;
use crate::field::Upstream;
use crate::geometry::Vec3;
use crate::spatial::{KdTree, LocalFrame};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayPrediction {
    pub depth: f64,
    pub intensity: f64,
    pub drop_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelTarget {
    pub depth: f64,
    pub intensity: f64,
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub normal: f64,
    pub cd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { depth: 1.0, intensity: 0.1, raydrop: 0.1, normal: 0.01, cd: 1.0 }
    }
}

/// Unweighted loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderLoss {
    pub total: f64,
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
}

/// L1 depth and squared intensity error averaged over rays valid in the
/// target, squared ray-drop error averaged over all rays. Returns the loss
/// and the gradient w.r.t. each prediction.
pub fn render_loss(pred: &[RayPrediction], target: &[PixelTarget], w: &LossWeights) -> Result<(RenderLoss, Vec<Upstream>), TrainError> {
    if pred.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    assert_eq!(pred.len(), target.len(), "prediction/target length mismatch");
    let valid = target.iter().filter(|t| !t.dropped).count();
    let nv = valid.max(1) as f64;
    let n = pred.len() as f64;
    let mut out = RenderLoss::default();
    let mut ups = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let drop_target = if t.dropped { 1.0 } else { 0.0 };
        let ep = p.drop_prob - drop_target;
        out.raydrop += ep * ep / n;
        let mut up = Upstream { raydrop: w.raydrop * 2.0 * ep / n, ..Default::default() };
        if !t.dropped {
            let ed = p.depth - t.depth;
            let ei = p.intensity - t.intensity;
            out.depth += ed.abs() / nv;
            out.intensity += ei * ei / nv;
            up.depth = w.depth * sign(ed) / nv;
            up.intensity = w.intensity * 2.0 * ei / nv;
        }
        ups.push(up);
    }
    out.total = w.depth * out.depth + w.intensity * out.intensity + w.raydrop * out.raydrop;
    Ok((out, ups))
}

/// Symmetric mean squared nearest-neighbour distance with its gradient
/// w.r.t. the synthesized points.
pub fn cd_loss_3d(synth: &[Vec3], gt: &[Vec3]) -> Result<(f64, Vec<Vec3>), TrainError> {
    if synth.is_empty() || gt.is_empty() {
        return Err(TrainError::EmptyCloud);
    }
    let ts = KdTree::from_points(synth).map_err(|_| TrainError::EmptyCloud)?;
    let tg = KdTree::from_points(gt).map_err(|_| TrainError::EmptyCloud)?;
    let (ns, ng) = (synth.len() as f64, gt.len() as f64);
    let mut grad = vec![Vec3::zeros(); synth.len()];
    let mut loss = 0.0;
    for (i, s) in synth.iter().enumerate() {
        let (j, d2) = tg.nearest_sq(s);
        loss += d2 / ns;
        grad[i] += 2.0 * (s - gt[j]) / ns;
    }
    for g in gt {
        let (i, d2) = ts.nearest_sq(g);
        loss += d2 / ng;
        grad[i] += 2.0 * (synth[i] - g) / ng;
    }
    Ok((loss, grad))
}

/// Sign with `sign(0) = 0`, the L1 subgradient used throughout.
fn sign(x: f64) -> f64 {
    if x == 0.0 { 0.0 } else { x.signum() }
}

fn l1(v: &Vec3) -> f64 {
    v.x.abs() + v.y.abs() + v.z.abs()
}

/// Sign-invariant L1 distance between unit normals and its gradient w.r.t. `a`.
fn normal_term(a: &Vec3, b: &Vec3) -> (f64, Vec3) {
    let minus = a - b;
    let plus = a + b;
    if l1(&minus) <= l1(&plus) {
        (l1(&minus), minus.map(sign))
    } else {
        (l1(&plus), plus.map(sign))
    }
}

/// Symmetric mean normal discrepancy over nearest-neighbour pairs between
/// the synthesized cloud (normals by PCA over `k` neighbours) and the
/// observed cloud with its precomputed normals. Returns the loss and the
/// gradient w.r.t. the synthesized points, obtained by differentiating the
/// smallest covariance eigenvector.
pub fn normal_loss(synth: &[Vec3], gt: &[Vec3], gt_normals: &[Vec3], k: usize) -> Result<(f64, Vec<Vec3>), TrainError> {
    if synth.len() <= k || gt.is_empty() {
        return Err(TrainError::EmptyCloud);
    }
    let ts = KdTree::from_points(synth).map_err(|_| TrainError::EmptyCloud)?;
    let tg = KdTree::from_points(gt).map_err(|_| TrainError::EmptyCloud)?;
    let hoods: Vec<(Vec<usize>, LocalFrame)> = synth
        .iter()
        .map(|p| {
            let idx: Vec<usize> = ts.knn(p, k).into_iter().map(|(j, _)| j).collect();
            let pts: Vec<Vec3> = idx.iter().map(|&j| synth[j]).collect();
            (idx, LocalFrame::fit(&pts))
        })
        .collect();
    let (ns, ng) = (synth.len() as f64, gt.len() as f64);
    let mut g_normal = vec![Vec3::zeros(); synth.len()];
    let mut loss = 0.0;
    for (i, s) in synth.iter().enumerate() {
        let (j, _) = tg.nearest_sq(s);
        let (l, g) = normal_term(&hoods[i].1.normal(), &gt_normals[j]);
        loss += l / ns;
        g_normal[i] += g / ns;
    }
    for (j, q) in gt.iter().enumerate() {
        let (i, _) = ts.nearest_sq(q);
        let (l, g) = normal_term(&hoods[i].1.normal(), &gt_normals[j]);
        loss += l / ng;
        g_normal[i] += g / ng;
    }
    let mut grad = vec![Vec3::zeros(); synth.len()];
    for (i, gn) in g_normal.iter().enumerate() {
        if *gn == Vec3::zeros() {
            continue;
        }
        let (idx, frame) = &hoods[i];
        if frame.is_degenerate() {
            continue;
        }
        let n = frame.normal();
        let mut a = Vec3::zeros();
        for m in 1..3 {
            let gap = frame.eigenvalues[m] - frame.eigenvalues[0];
            if gap > 1e-18 {
                let v = frame.eigenvectors.column(m);
                a -= v * (gn.dot(&v) / gap);
            }
        }
        let sym = (a * n.transpose() + n * a.transpose()) * (1.0 / idx.len() as f64);
        for &j in idx {
            grad[j] += sym * (synth[j] - frame.mean);
        }
    }
    Ok((loss, grad))
}
