//! Positional encodings: multiresolution hash grid, multi-scale tri-planar
//! grids and sinusoidal features, with coarse-to-fine level masking.

use std::f64::consts::PI;

use super::FieldError;
use crate::geometry::Vec3;

/// Tolerance outside the unit cube that is clamped rather than rejected.
pub const DOMAIN_EPS: f64 = 1e-6;

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingKind {
    /// Planar grids concatenated with hash-grid features.
    Hybrid,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingConfig {
    pub kind: EncodingKind,
    /// Hash-grid levels.
    pub levels: usize,
    pub base_resolution: usize,
    pub growth: f64,
    pub features_per_level: usize,
    /// Entries per hashed level; must be a power of two.
    pub hash_table_size: usize,
    /// Resolution of the finest planar level; coarser levels halve it.
    pub planar_resolution: usize,
    pub planar_levels: usize,
    pub planar_channels: usize,
    pub sinusoidal_levels: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            kind: EncodingKind::Hybrid,
            levels: 4,
            base_resolution: 16,
            growth: 1.5,
            features_per_level: 2,
            hash_table_size: 1 << 15,
            planar_resolution: 64,
            planar_levels: 2,
            planar_channels: 4,
            sinusoidal_levels: 6,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidConfig(m.to_string()));
        match self.kind {
            EncodingKind::Hybrid => {
                if self.levels == 0 {
                    return bad("hash levels must be >= 1");
                }
                if self.base_resolution < 1 {
                    return bad("base_resolution must be >= 1");
                }
                if !(self.growth > 1.0) {
                    return bad("growth must exceed 1");
                }
                if self.features_per_level == 0 {
                    return bad("features_per_level must be >= 1");
                }
                if !self.hash_table_size.is_power_of_two() {
                    return bad("hash_table_size must be a power of two");
                }
                if self.planar_levels > 0 {
                    if self.planar_channels == 0 {
                        return bad("planar_channels must be >= 1");
                    }
                    if self.planar_resolution >> (self.planar_levels - 1) < 1 {
                        return bad("planar_resolution too small for planar_levels");
                    }
                }
            }
            EncodingKind::Sinusoidal => {
                if self.sinusoidal_levels == 0 {
                    return bad("sinusoidal_levels must be >= 1");
                }
            }
        }
        Ok(())
    }

    /// Resolution of hash level `l`: `floor(base * growth^l)`.
    pub fn hash_resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as usize
    }

    pub fn planar_resolution_at(&self, level: usize) -> usize {
        self.planar_resolution >> (self.planar_levels - 1 - level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LevelKind {
    Hash { res: usize, dense: bool, table: usize },
    Planar { res: usize },
    Sin { freq: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Level {
    pub kind: LevelKind,
    /// Coarse-to-fine rank used by the mask.
    pub rank: usize,
    pub param_offset: usize,
    pub feat_offset: usize,
    pub width: usize,
}

/// Where every level lives in the parameter vector and the feature vector.
/// Levels are ordered coarse to fine by spatial resolution (hash before
/// planar on ties); the mask rank follows that order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingLayout {
    pub(crate) levels: Vec<Level>,
    pub num_levels: usize,
    pub feature_dim: usize,
    pub param_count: usize,
    pub hash_params: std::ops::Range<usize>,
    pub planar_params: std::ops::Range<usize>,
    channels: usize,
}

impl EncodingLayout {
    pub fn new(cfg: &EncodingConfig) -> Self {
        match cfg.kind {
            EncodingKind::Sinusoidal => {
                let levels: Vec<Level> = (0..cfg.sinusoidal_levels)
                    .map(|l| Level {
                        kind: LevelKind::Sin { freq: 2f64.powi(l as i32) * PI },
                        rank: l,
                        param_offset: 0,
                        feat_offset: 6 * l,
                        width: 6,
                    })
                    .collect();
                Self {
                    num_levels: levels.len(),
                    feature_dim: 6 * levels.len(),
                    levels,
                    param_count: 0,
                    hash_params: 0..0,
                    planar_params: 0..0,
                    channels: 0,
                }
            }
            EncodingKind::Hybrid => {
                let f = cfg.features_per_level;
                let c = cfg.planar_channels;
                let mut offset = 0;
                // (sort key, level)
                let mut levels: Vec<(usize, usize, Level)> = Vec::new();
                for l in 0..cfg.levels {
                    let res = cfg.hash_resolution(l);
                    let corners = (res + 1).pow(3);
                    let dense = corners <= cfg.hash_table_size;
                    let table = if dense { corners } else { cfg.hash_table_size };
                    levels.push((res, 0, Level { kind: LevelKind::Hash { res, dense, table }, rank: 0, param_offset: offset, feat_offset: 0, width: f }));
                    offset += table * f;
                }
                let hash_end = offset;
                for l in 0..cfg.planar_levels {
                    let res = cfg.planar_resolution_at(l);
                    levels.push((res, 1, Level { kind: LevelKind::Planar { res }, rank: 0, param_offset: offset, feat_offset: 0, width: c }));
                    offset += 3 * (res + 1) * (res + 1) * c;
                }
                levels.sort_by_key(|(res, kind, _)| (*res, *kind));
                let mut feat = 0;
                let levels: Vec<Level> = levels
                    .into_iter()
                    .enumerate()
                    .map(|(rank, (_, _, mut lv))| {
                        lv.rank = rank;
                        lv.feat_offset = feat;
                        feat += lv.width;
                        lv
                    })
                    .collect();
                Self {
                    num_levels: levels.len(),
                    feature_dim: feat,
                    levels,
                    param_count: offset,
                    hash_params: 0..hash_end,
                    planar_params: hash_end..offset,
                    channels: c,
                }
            }
        }
    }
}

/// Coarse-to-fine weight of `level` at progress parameter `alpha`.
pub fn c2f_weight(alpha: f64, level: usize) -> f64 {
    let d = alpha - level as f64;
    if d < 0.0 {
        0.0
    } else if d < 1.0 {
        (1.0 - (d * PI).cos()) * 0.5
    } else {
        1.0
    }
}

/// `(sin(2^l pi x), cos(2^l pi x))` per coordinate for `l = 0..levels`,
/// laid out per level as `[sin x, sin y, sin z, cos x, cos y, cos z]`.
pub fn sinusoidal_encode(x: &Vec3, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * levels);
    for l in 0..levels {
        let f = 2f64.powi(l as i32) * PI;
        for k in 0..3 {
            out.push((f * x[k]).sin());
        }
        for k in 0..3 {
            out.push((f * x[k]).cos());
        }
    }
    out
}

/// Validates a query against the unit cube, clamping within tolerance.
pub fn domain_point(x: &Vec3) -> Result<Vec3, FieldError> {
    for k in 0..3 {
        if !(x[k] >= -DOMAIN_EPS && x[k] <= 1.0 + DOMAIN_EPS) {
            return Err(FieldError::OutOfDomain(*x));
        }
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}

pub fn in_domain(x: &Vec3) -> bool {
    (0..3).all(|k| x[k] >= -DOMAIN_EPS && x[k] <= 1.0 + DOMAIN_EPS)
}

#[inline]
fn hash_index(i: usize, j: usize, k: usize, res: usize, dense: bool, table: usize) -> usize {
    if dense {
        let n = res + 1;
        i + n * (j + n * k)
    } else {
        let h = (i as u32).wrapping_mul(HASH_PRIMES[0])
            ^ (j as u32).wrapping_mul(HASH_PRIMES[1])
            ^ (k as u32).wrapping_mul(HASH_PRIMES[2]);
        (h as usize) & (table - 1)
    }
}

/// Cell index and fractional offset of `x` (in [0,1]) on a grid of `res` cells.
#[inline]
fn cell(x: f64, res: usize) -> (usize, f64) {
    let p = x * res as f64;
    let i = (p.floor() as usize).min(res - 1);
    (i, p - i as f64)
}

/// Sink for gradients of sparse encoding parameters.
pub(crate) trait ParamSink {
    fn add(&mut self, index: usize, value: f64);
}

impl ParamSink for Vec<(u32, f64)> {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self.push((index as u32, value));
    }
}

impl EncodingLayout {
    /// Writes the masked encoding of an in-domain point into `out`.
    pub(crate) fn encode_into(&self, params: &[f64], x: &Vec3, alpha: Option<f64>, out: &mut [f64]) {
        for lv in &self.levels {
            let w = alpha.map_or(1.0, |a| c2f_weight(a, lv.rank));
            let dst = &mut out[lv.feat_offset..lv.feat_offset + lv.width];
            if w == 0.0 {
                dst.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            match lv.kind {
                LevelKind::Sin { freq } => {
                    for k in 0..3 {
                        let (s, c) = (freq * x[k]).sin_cos();
                        dst[k] = w * s;
                        dst[3 + k] = w * c;
                    }
                }
                LevelKind::Hash { res, dense, table } => {
                    let (i, fx) = cell(x.x, res);
                    let (j, fy) = cell(x.y, res);
                    let (k, fz) = cell(x.z, res);
                    dst.iter_mut().for_each(|v| *v = 0.0);
                    for corner in 0..8 {
                        let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                        let cw = (if di == 1 { fx } else { 1.0 - fx })
                            * (if dj == 1 { fy } else { 1.0 - fy })
                            * (if dk == 1 { fz } else { 1.0 - fz });
                        let base = lv.param_offset + hash_index(i + di, j + dj, k + dk, res, dense, table) * lv.width;
                        for f in 0..lv.width {
                            dst[f] += cw * params[base + f];
                        }
                    }
                    dst.iter_mut().for_each(|v| *v *= w);
                }
                LevelKind::Planar { res } => {
                    let c = self.channels;
                    let mut prod = [1.0f64; 16];
                    let prod = &mut prod[..c];
                    for (plane, (a, b)) in [(0usize, 1usize), (0, 2), (1, 2)].iter().enumerate() {
                        let s = self.bilinear(params, lv.param_offset, res, plane, x[*a], x[*b]);
                        for ch in 0..c {
                            prod[ch] *= s[ch];
                        }
                    }
                    for ch in 0..c {
                        dst[ch] = w * prod[ch];
                    }
                }
            }
        }
    }

    #[inline]
    fn plane_base(&self, offset: usize, res: usize, plane: usize) -> usize {
        offset + plane * (res + 1) * (res + 1) * self.channels
    }

    fn bilinear(&self, params: &[f64], offset: usize, res: usize, plane: usize, u: f64, v: f64) -> [f64; 16] {
        let c = self.channels;
        let base = self.plane_base(offset, res, plane);
        let (i, fu) = cell(u, res);
        let (j, fv) = cell(v, res);
        let mut out = [0.0; 16];
        for corner in 0..4 {
            let (di, dj) = (corner & 1, corner >> 1);
            let cw = (if di == 1 { fu } else { 1.0 - fu }) * (if dj == 1 { fv } else { 1.0 - fv });
            let at = base + ((j + dj) * (res + 1) + (i + di)) * c;
            for ch in 0..c {
                out[ch] += cw * params[at + ch];
            }
        }
        out
    }

    /// Back-propagates `grad_out` (gradient w.r.t. the masked encoding) into
    /// encoding parameters and returns the gradient w.r.t. `x`.
    pub(crate) fn encode_backward(
        &self,
        params: &[f64],
        x: &Vec3,
        alpha: Option<f64>,
        grad_out: &[f64],
        sink: &mut impl ParamSink,
    ) -> Vec3 {
        let mut gx = Vec3::zeros();
        for lv in &self.levels {
            let w = alpha.map_or(1.0, |a| c2f_weight(a, lv.rank));
            if w == 0.0 {
                continue;
            }
            let g = &grad_out[lv.feat_offset..lv.feat_offset + lv.width];
            match lv.kind {
                LevelKind::Sin { freq } => {
                    for k in 0..3 {
                        let (s, c) = (freq * x[k]).sin_cos();
                        gx[k] += w * freq * (g[k] * c - g[3 + k] * s);
                    }
                }
                LevelKind::Hash { res, dense, table } => {
                    let (i, fx) = cell(x.x, res);
                    let (j, fy) = cell(x.y, res);
                    let (k, fz) = cell(x.z, res);
                    let scale = res as f64;
                    for corner in 0..8 {
                        let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                        let (wx, dwx) = if di == 1 { (fx, 1.0) } else { (1.0 - fx, -1.0) };
                        let (wy, dwy) = if dj == 1 { (fy, 1.0) } else { (1.0 - fy, -1.0) };
                        let (wz, dwz) = if dk == 1 { (fz, 1.0) } else { (1.0 - fz, -1.0) };
                        let cw = wx * wy * wz;
                        let base = lv.param_offset + hash_index(i + di, j + dj, k + dk, res, dense, table) * lv.width;
                        let mut dot = 0.0;
                        for f in 0..lv.width {
                            sink.add(base + f, w * cw * g[f]);
                            dot += g[f] * params[base + f];
                        }
                        dot *= w * scale;
                        gx.x += dot * dwx * wy * wz;
                        gx.y += dot * wx * dwy * wz;
                        gx.z += dot * wx * wy * dwz;
                    }
                }
                LevelKind::Planar { res } => {
                    let c = self.channels;
                    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
                    let samples: Vec<[f64; 16]> = pairs
                        .iter()
                        .enumerate()
                        .map(|(p, (a, b))| self.bilinear(params, lv.param_offset, res, p, x[*a], x[*b]))
                        .collect();
                    let scale = res as f64;
                    for (plane, (a, b)) in pairs.iter().enumerate() {
                        let o1 = &samples[(plane + 1) % 3];
                        let o2 = &samples[(plane + 2) % 3];
                        // upstream for this plane's bilinear sample, per channel
                        let mut gs = [0.0f64; 16];
                        for ch in 0..c {
                            gs[ch] = w * g[ch] * o1[ch] * o2[ch];
                        }
                        let base = self.plane_base(lv.param_offset, res, plane);
                        let (i, fu) = cell(x[*a], res);
                        let (j, fv) = cell(x[*b], res);
                        for corner in 0..4 {
                            let (di, dj) = (corner & 1, corner >> 1);
                            let (wu, dwu) = if di == 1 { (fu, 1.0) } else { (1.0 - fu, -1.0) };
                            let (wv, dwv) = if dj == 1 { (fv, 1.0) } else { (1.0 - fv, -1.0) };
                            let at = base + ((j + dj) * (res + 1) + (i + di)) * c;
                            let mut dot = 0.0;
                            for ch in 0..c {
                                sink.add(at + ch, wu * wv * gs[ch]);
                                dot += gs[ch] * params[at + ch];
                            }
                            gx[*a] += scale * dot * dwu * wv;
                            gx[*b] += scale * dot * wu * dwv;
                        }
                    }
                }
            }
        }
        gx
    }
}
