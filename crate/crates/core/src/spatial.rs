//! Exact nearest-neighbour search, voxel downsampling and PCA normals.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::SymmetricEigen;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::{Mat3, Vec3};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxel(f64),
    #[error("need more than k={k} points with k >= 3, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("{count} neighbourhoods have rank < 2 covariance")]
    DegenerateNeighborhood { count: usize },
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Balanced k-d tree over a fixed point set. Queries are exact; ties between
/// equidistant points resolve to the lowest source index.
#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    points: Vec<[f64; 3]>,
    index: Vec<u32>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: u32,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl KdTree {
    pub fn build(cloud: &PointCloud) -> Result<Self, SpatialError> {
        Self::from_points(&cloud.points)
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self, SpatialError> {
        if points.is_empty() {
            return Err(SpatialError::EmptyCloud);
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        Self::build_node(points, &mut order, 0, &mut nodes);
        Ok(Self {
            nodes,
            points: order.iter().map(|&i| {
                let p = points[i as usize];
                [p.x, p.y, p.z]
            }).collect(),
            index: order,
        })
    }

    fn build_node(points: &[Vec3], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        if order.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf { start: offset, end: offset + order.len() });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in order.iter() {
            let p = points[i as usize];
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        let ext = hi - lo;
        let dim = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][dim]
                .total_cmp(&points[b as usize][dim])
                .then(a.cmp(&b))
        });
        let value = points[order[mid] as usize][dim];
        nodes.push(Node::Leaf { start: 0, end: 0 });
        let (l, r) = order.split_at_mut(mid);
        let left = Self::build_node(points, l, offset, nodes);
        let right = Self::build_node(points, r, offset + mid, nodes);
        nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest stored point: `(source index, squared distance)`.
    pub fn nearest_sq(&self, q: &Vec3) -> (usize, f64) {
        let q = [q.x, q.y, q.z];
        let mut best = Candidate { d2: f64::INFINITY, idx: u32::MAX };
        self.search_nearest(0, &q, &mut best);
        (best.idx as usize, best.d2)
    }

    /// Nearest stored point: `(source index, distance)`.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let (i, d2) = self.nearest_sq(q);
        (i, d2.sqrt())
    }

    fn search_nearest(&self, node: usize, q: &[f64; 3], best: &mut Candidate) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for k in start..end {
                    let p = &self.points[k];
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dz = p[2] - q[2];
                    let c = Candidate { d2: dx * dx + dy * dy + dz * dz, idx: self.index[k] };
                    if c < *best {
                        *best = c;
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_nearest(near, q, best);
                if diff * diff <= best.d2 {
                    self.search_nearest(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`, as `(index, squared distance)`.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let q = [q.x, q.y, q.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_knn(0, &q, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.idx as usize, c.d2)).collect()
    }

    fn search_knn(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let p = &self.points[i];
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dz = p[2] - q[2];
                    let c = Candidate { d2: dx * dx + dy * dy + dz * dz, idx: self.index[i] };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_knn(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search_knn(far, q, k, heap);
                }
            }
        }
    }
}

/// One centroid per occupied voxel, ordered by cell key (z, then y, then x).
/// Intensities are averaged; normals are averaged and renormalized.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud, SpatialError> {
    if !(voxel_size > 0.0) {
        return Err(SpatialError::NonPositiveVoxel(voxel_size));
    }
    #[derive(Default)]
    struct Acc {
        sum: Vec3,
        intensity: f64,
        normal: Vec3,
        count: usize,
    }
    let mut cells: BTreeMap<(i64, i64, i64), Acc> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = (
            (p.z / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.x / voxel_size).floor() as i64,
        );
        let acc = cells.entry(key).or_default();
        acc.sum += p;
        acc.count += 1;
        if let Some(s) = &cloud.intensity {
            acc.intensity += s[i];
        }
        if let Some(n) = &cloud.normals {
            acc.normal += n[i];
        }
    }
    let mut out = PointCloud::default();
    let mut intensity = Vec::new();
    let mut normals = Vec::new();
    for acc in cells.values() {
        let inv = 1.0 / acc.count as f64;
        out.points.push(acc.sum * inv);
        intensity.push(acc.intensity * inv);
        let n = acc.normal;
        normals.push(if n.norm() > 0.0 { n / n.norm() } else { Vec3::z() });
    }
    if cloud.intensity.is_some() {
        out.intensity = Some(intensity);
    }
    if cloud.normals.is_some() {
        out.normals = Some(normals);
    }
    Ok(out)
}

/// Eigen-decomposition of a neighbourhood covariance, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct LocalFrame {
    pub eigenvalues: [f64; 3],
    /// Columns are the eigenvectors matching `eigenvalues`.
    pub eigenvectors: Mat3,
    pub mean: Vec3,
}

impl LocalFrame {
    pub fn fit(neighbors: &[Vec3]) -> Self {
        let n = neighbors.len() as f64;
        let mean = neighbors.iter().sum::<Vec3>() / n;
        let mut cov = Mat3::zeros();
        for p in neighbors {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut vecs = Mat3::zeros();
        let mut vals = [0.0; 3];
        for (k, &o) in order.iter().enumerate() {
            vals[k] = eig.eigenvalues[o];
            vecs.set_column(k, &eig.eigenvectors.column(o));
        }
        Self { eigenvalues: vals, eigenvectors: vecs, mean }
    }

    /// Rank < 2 within a relative tolerance.
    pub fn is_degenerate(&self) -> bool {
        let max = self.eigenvalues[2];
        max <= 1e-30 || self.eigenvalues[1] <= 1e-9 * max
    }

    pub fn normal(&self) -> Vec3 {
        self.eigenvectors.column(0).into_owned()
    }
}

/// Normals plus the indices whose neighbourhood was degenerate (those get +z).
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: Vec<usize>,
}

impl NormalEstimate {
    /// Fails if any neighbourhood was degenerate.
    pub fn strict(self) -> Result<PointCloud, SpatialError> {
        if self.degenerate.is_empty() {
            Ok(self.cloud)
        } else {
            Err(SpatialError::DegenerateNeighborhood { count: self.degenerate.len() })
        }
    }
}

/// PCA normals from `k` nearest neighbours (the point itself included),
/// oriented so that `n . (sensor_origin - p) >= 0`.
pub fn estimate_normals(cloud: &PointCloud, k: usize, sensor_origin: &Vec3) -> Result<NormalEstimate, SpatialError> {
    if k < 3 || cloud.len() <= k {
        return Err(SpatialError::TooFewPoints { k, n: cloud.len() });
    }
    let tree = KdTree::build(cloud)?;
    let mut normals = Vec::with_capacity(cloud.len());
    let mut degenerate = Vec::new();
    let mut nb = Vec::with_capacity(k);
    for (i, p) in cloud.points.iter().enumerate() {
        nb.clear();
        nb.extend(tree.knn(p, k).iter().map(|&(j, _)| cloud.points[j]));
        let frame = LocalFrame::fit(&nb);
        if frame.is_degenerate() {
            degenerate.push(i);
            normals.push(Vec3::z());
            continue;
        }
        let mut n = frame.normal().normalize();
        if n.dot(&(sensor_origin - p)) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok(NormalEstimate { cloud: out, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    fn linear_scan(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn single_point_tree() {
        let tree = KdTree::from_points(&[Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(tree.nearest(&Vec3::new(-5.0, 0.0, 9.0)).0, 0);
        assert_eq!(tree.nearest(&Vec3::new(1.0, 2.0, 3.0)), (0, 0.0));
    }

    #[test]
    fn empty_cloud_rejected() {
        assert_eq!(KdTree::from_points(&[]).unwrap_err(), SpatialError::EmptyCloud);
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_cloud(&mut rng, 1000);
        let tree = KdTree::from_points(&pts).unwrap();
        for _ in 0..2000 {
            let q = Vec3::new(rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2));
            let (i, d2) = tree.nearest_sq(&q);
            assert_eq!((i, d2), linear_scan(&pts, &q));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // many duplicates spread across leaves
        let mut pts = Vec::new();
        for i in 0..100 {
            pts.push(Vec3::new((i % 7) as f64, 0.0, 0.0));
        }
        let tree = KdTree::from_points(&pts).unwrap();
        for x in 0..7 {
            let (i, d) = tree.nearest(&Vec3::new(x as f64, 0.0, 0.0));
            assert_eq!(i, x);
            assert_eq!(d, 0.0);
        }
        let two = KdTree::from_points(&[Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(two.nearest(&Vec3::zeros()).0, 0);
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_cloud(&mut rng, 500);
        let tree = KdTree::from_points(&pts).unwrap();
        for _ in 0..100 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(tree.knn(&q, 12), all[..12].to_vec());
        }
    }

    #[test]
    fn voxel_single_cell_centroid() {
        let cloud = PointCloud::from_points(vec![
            Vec3::new(0.01, 0.01, 0.01),
            Vec3::new(0.03, 0.02, 0.04),
            Vec3::new(0.02, 0.03, 0.01),
        ]);
        let out = voxel_downsample(&cloud, 0.05).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points[0] - Vec3::new(0.02, 0.02, 0.02)).norm() < 1e-15);
    }

    #[test]
    fn voxel_boundary_uses_floor() {
        let cloud = PointCloud::from_points(vec![Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.4999, 0.0, 0.0)]);
        let out = voxel_downsample(&cloud, 0.5).unwrap();
        assert_eq!(out.len(), 2);
        // x = 0.5 lies in cell 1, ordered after cell 0
        assert_eq!(out.points[1].x, 0.5);
        assert!(voxel_downsample(&cloud, 0.0).is_err());
        assert!(voxel_downsample(&cloud, -1.0).is_err());
    }

    #[test]
    fn voxel_matches_hashmap_grouping() {
        use std::collections::HashMap;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_cloud(&mut rng, 10_000);
        let v = 0.05;
        let out = voxel_downsample(&PointCloud::from_points(pts.clone()), v).unwrap();
        let mut groups: HashMap<[i64; 3], Vec<Vec3>> = HashMap::new();
        for p in &pts {
            groups
                .entry([(p.x / v).floor() as i64, (p.y / v).floor() as i64, (p.z / v).floor() as i64])
                .or_default()
                .push(*p);
        }
        assert_eq!(out.len(), groups.len());
        for p in &out.points {
            let key = [(p.x / v).floor() as i64, (p.y / v).floor() as i64, (p.z / v).floor() as i64];
            let g = &groups[&key];
            let c = g.iter().sum::<Vec3>() / g.len() as f64;
            assert!((c - p).norm() < 1e-12);
        }
        // ascending (z, y, x) key order
        let keys: Vec<_> = out
            .points
            .iter()
            .map(|p| ((p.z / v).floor() as i64, (p.y / v).floor() as i64, (p.x / v).floor() as i64))
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn voxel_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cloud = PointCloud::from_points(random_cloud(&mut rng, 3000));
        let once = voxel_downsample(&cloud, 0.1).unwrap();
        let twice = voxel_downsample(&once, 0.1).unwrap();
        assert!(once.len() <= cloud.len());
        assert_eq!(once, twice);
    }

    #[test]
    fn plane_normals_face_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -0.5))
            .collect();
        let est = estimate_normals(&PointCloud::from_points(pts), 12, &Vec3::zeros())
            .unwrap()
            .strict()
            .unwrap();
        for n in est.normals.unwrap() {
            assert!((n - Vec3::z()).norm() < 1e-9);
        }
    }

    #[test]
    fn sphere_normals_point_inward() {
        // Fibonacci lattice: quasi-uniform points on the unit sphere
        let n = 2000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * i as f64;
                Vec3::new(r * a.cos(), r * a.sin(), z)
            })
            .collect();
        let est = estimate_normals(&PointCloud::from_points(pts.clone()), 12, &Vec3::zeros())
            .unwrap()
            .strict()
            .unwrap();
        for (p, n) in pts.iter().zip(est.normals.unwrap()) {
            assert!(((n.norm()) - 1.0).abs() < 1e-10);
            let angle = n.dot(&(-p)).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle < 5.0, "angle {angle}");
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<Vec3> = (0..40).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let est = estimate_normals(&PointCloud::from_points(pts), 5, &Vec3::zeros()).unwrap();
        assert_eq!(est.degenerate.len(), 40);
        assert_eq!(est.cloud.normals.as_ref().unwrap()[0], Vec3::z());
        assert!(matches!(est.strict(), Err(SpatialError::DegenerateNeighborhood { count: 40 })));
    }

    #[test]
    fn too_few_points_for_k() {
        let pts = PointCloud::from_points(vec![Vec3::zeros(); 5]);
        assert!(estimate_normals(&pts, 5, &Vec3::zeros()).is_err());
        assert!(estimate_normals(&pts, 2, &Vec3::zeros()).is_err());
    }
}
