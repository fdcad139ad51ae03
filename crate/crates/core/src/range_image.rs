//! Range images and the spherical pixel/angle convention shared by the
//! scanner, the projection utilities and the neural field's ray generator.
//!
//! Column `c` maps to azimuth `theta = 2 pi (c + 0.5) / W - pi`, row `r` to
//! elevation `phi = fov_up - (r + 0.5) / H * (fov_up - fov_down)`. The sensor
//! frame direction is `(cos phi cos theta, cos phi sin theta, sin phi)`.

use std::f64::consts::PI;

use crate::cloud::PointCloud;
use crate::geometry::Vec3;

/// Depth value stored for dropped pixels.
pub const INVALID_DEPTH: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScannerConfig {
    /// Number of beams (rows).
    pub height: usize,
    /// Azimuth steps (columns).
    pub width: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub max_range: f64,
    pub drop_prob_base: f64,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 360,
            fov_up_deg: 10.0,
            fov_down_deg: -30.0,
            max_range: 1.0,
            drop_prob_base: 0.02,
        }
    }
}

impl ScannerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.height < 2 || self.width < 2 {
            return Err(format!("scanner needs at least 2x2 pixels, got {}x{}", self.height, self.width));
        }
        if self.fov_up_deg <= self.fov_down_deg {
            return Err("fov_up must exceed fov_down".into());
        }
        if !(self.max_range > 0.0) {
            return Err("max_range must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.drop_prob_base) {
            return Err("drop_prob_base must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn azimuth(&self, col: usize) -> f64 {
        2.0 * PI * (col as f64 + 0.5) / self.width as f64 - PI
    }

    pub fn elevation(&self, row: usize) -> f64 {
        let up = self.fov_up_deg.to_radians();
        let down = self.fov_down_deg.to_radians();
        up - (row as f64 + 0.5) / self.height as f64 * (up - down)
    }

    /// Unit direction of pixel `(row, col)` in the sensor frame.
    pub fn direction(&self, row: usize, col: usize) -> Vec3 {
        spherical_direction(self.azimuth(col), self.elevation(row))
    }

    /// Pixel hit by a sensor-frame direction, `None` outside the vertical FOV.
    /// The azimuth seam `theta = pi` wraps to column 0.
    pub fn pixel_of(&self, p: &Vec3) -> Option<(usize, usize)> {
        let r = p.norm();
        if r == 0.0 || !r.is_finite() {
            return None;
        }
        let theta = p.y.atan2(p.x);
        let phi = (p.z / r).clamp(-1.0, 1.0).asin();
        let up = self.fov_up_deg.to_radians();
        let down = self.fov_down_deg.to_radians();
        let v = (up - phi) / (up - down) * self.height as f64;
        if !(0.0..self.height as f64).contains(&v) {
            return None;
        }
        let u = (theta + PI) / (2.0 * PI) * self.width as f64;
        let col = (u.floor() as i64).rem_euclid(self.width as i64) as usize;
        Some((v.floor() as usize, col))
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

pub fn spherical_direction(theta: f64, phi: f64) -> Vec3 {
    Vec3::new(phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin())
}

/// H x W raster of depth, intensity and ray-drop mask, row-major.
///
/// Dropped pixels always carry depth [`INVALID_DEPTH`] and intensity 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
    pub drop: Vec<bool>,
}

impl RangeImage {
    /// Image with every pixel dropped.
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![INVALID_DEPTH; n],
            intensity: vec![0.0; n],
            drop: vec![true; n],
        }
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn set(&mut self, row: usize, col: usize, depth: f64, intensity: f64) {
        let i = self.index(row, col);
        self.depth[i] = depth;
        self.intensity[i] = intensity;
        self.drop[i] = false;
    }

    pub fn set_dropped(&mut self, idx: usize) {
        self.depth[idx] = INVALID_DEPTH;
        self.intensity[idx] = 0.0;
        self.drop[idx] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.drop.iter().filter(|d| !**d).count()
    }

    pub fn max_valid_depth(&self) -> Option<f64> {
        self.depth
            .iter()
            .zip(&self.drop)
            .filter(|(_, d)| !**d)
            .map(|(v, _)| *v)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Projects sensor-frame points into a range image; on pixel collisions the
/// nearer point wins.
pub fn project_points(cloud: &PointCloud, cfg: &ScannerConfig) -> RangeImage {
    let mut img = RangeImage::empty(cfg.height, cfg.width);
    for (i, p) in cloud.points.iter().enumerate() {
        let Some((row, col)) = cfg.pixel_of(p) else { continue };
        let d = p.norm();
        let idx = img.index(row, col);
        if img.drop[idx] || d < img.depth[idx] {
            let s = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
            img.set(row, col, d, s);
        }
    }
    img
}

/// Sensor-frame points of all non-dropped pixels in row-major order.
pub fn unproject(img: &RangeImage, cfg: &ScannerConfig) -> PointCloud {
    let mut points = Vec::with_capacity(img.valid_count());
    let mut intensity = Vec::with_capacity(img.valid_count());
    for row in 0..img.height {
        for col in 0..img.width {
            let i = img.index(row, col);
            if img.drop[i] {
                continue;
            }
            points.push(cfg.direction(row, col) * img.depth[i]);
            intensity.push(img.intensity[i]);
        }
    }
    PointCloud {
        points,
        intensity: Some(intensity),
        normals: None,
    }
}
