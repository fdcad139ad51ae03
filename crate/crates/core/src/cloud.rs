use crate::geometry::Vec3;

/// Ordered point set with optional per-point intensity and unit normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub intensity: Option<Vec<f64>>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self {
            points,
            intensity: None,
            normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud made of the given indices, attributes carried.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self.intensity.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            normals: self.normals.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().sum::<Vec3>() / self.points.len() as f64)
    }
}
