//! Neural LiDAR field: encodings, a small MLP with density/intensity/ray-drop
//! heads, volume rendering and a hand-written reverse pass.

pub mod encoding;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Vec3;
pub use encoding::{c2f_weight, sinusoidal_encode, EncodingConfig, EncodingKind, EncodingLayout};
pub use render::{
    backward, composite, pose_gradient, ray_from_pixel, render_ray, FieldGrad, Ray, RayGradient, RenderOptions,
    RenderOutput, Upstream,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error("query {0:?} outside the unit cube")]
    OutOfDomain(Vec3),
    #[error("render output carries no gradient tape")]
    TapeMissing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub hidden_width: usize,
    /// Multiplier on the softplus density head.
    pub density_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { encoding: EncodingConfig::default(), hidden_width: 32, density_scale: 50.0 }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        self.encoding.validate()?;
        if self.hidden_width == 0 {
            return Err(FieldError::InvalidConfig("hidden_width must be >= 1".into()));
        }
        if !(self.density_scale > 0.0) {
            return Err(FieldError::InvalidConfig("density_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Which block of the flat parameter vector an index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Hash,
    Planar,
    Mlp,
}

/// Raw head outputs at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub intensity: f64,
    pub drop_logit: f64,
}

/// All trainable field parameters in one flat vector, encoding blocks first
/// and MLP last, with a gradient buffer of the same shape.
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub cfg: FieldConfig,
    pub layout: EncodingLayout,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    in_dim: usize,
    mlp_offset: usize,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FieldParams {
    pub fn init(cfg: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        cfg.validate()?;
        let layout = EncodingLayout::new(&cfg.encoding);
        let in_dim = 3 + layout.feature_dim;
        let mlp_offset = layout.param_count;
        let h = cfg.hidden_width;
        let mlp_len = h * in_dim + h + h * h + h + 3 * h + 3;
        let mut values = vec![0.0; mlp_offset + mlp_len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut values[layout.hash_params.clone()] {
            *v = rng.random_range(-1e-4..1e-4);
        }
        for v in &mut values[layout.planar_params.clone()] {
            *v = rng.random_range(0.1..0.5);
        }
        let mut p = Self { cfg, layout, grads: vec![0.0; values.len()], values, in_dim, mlp_offset };
        for (rows, cols, w_off, b_off) in p.mlp_blocks() {
            let bound = 1.0 / (cols as f64).sqrt();
            for v in &mut p.values[w_off..w_off + rows * cols] {
                *v = rng.random_range(-bound..bound);
            }
            for v in &mut p.values[b_off..b_off + rows] {
                *v = rng.random_range(-bound..bound);
            }
        }
        // start with a thin, mostly transparent medium
        let (_, _, _, b3) = p.mlp_blocks()[2];
        p.values[b3] = -3.0;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn class_of(&self, index: usize) -> ParamClass {
        if self.layout.hash_params.contains(&index) {
            ParamClass::Hash
        } else if self.layout.planar_params.contains(&index) {
            ParamClass::Planar
        } else {
            ParamClass::Mlp
        }
    }

    pub fn mlp_range(&self) -> std::ops::Range<usize> {
        self.mlp_offset..self.values.len()
    }

    pub fn mlp_input_dim(&self) -> usize {
        self.in_dim
    }

    /// (rows, cols, weight offset, bias offset) for the three dense layers.
    fn mlp_blocks(&self) -> [(usize, usize, usize, usize); 3] {
        let h = self.cfg.hidden_width;
        let w1 = self.mlp_offset;
        let b1 = w1 + h * self.in_dim;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + 3 * h;
        [(h, self.in_dim, w1, b1), (h, h, w2, b2), (3, h, w3, b3)]
    }

    /// Length of one per-sample activation record.
    pub(crate) fn act_len(&self) -> usize {
        self.in_dim + 2 * self.cfg.hidden_width + 3
    }

    pub fn hash_encode(&self, x: &Vec3) -> Result<Vec<f64>, FieldError> {
        self.encode_kind(x, |k| matches!(k, encoding::LevelKind::Hash { .. }))
    }

    pub fn planar_encode(&self, x: &Vec3) -> Result<Vec<f64>, FieldError> {
        self.encode_kind(x, |k| matches!(k, encoding::LevelKind::Planar { .. }))
    }

    fn encode_kind(&self, x: &Vec3, keep: impl Fn(&encoding::LevelKind) -> bool) -> Result<Vec<f64>, FieldError> {
        let full = self.masked_encoding(x, None)?;
        let mut out = Vec::new();
        for lv in &self.layout.levels {
            if keep(&lv.kind) {
                out.extend_from_slice(&full[lv.feat_offset..lv.feat_offset + lv.width]);
            }
        }
        Ok(out)
    }

    /// Encoding with each level scaled by its coarse-to-fine weight; `None`
    /// leaves every level on.
    pub fn masked_encoding(&self, x: &Vec3, alpha: Option<f64>) -> Result<Vec<f64>, FieldError> {
        let x = encoding::domain_point(x)?;
        let mut out = vec![0.0; self.layout.feature_dim];
        self.layout.encode_into(&self.values, &x, alpha, &mut out);
        Ok(out)
    }

    pub fn query(&self, x: &Vec3, alpha: Option<f64>) -> Result<FieldSample, FieldError> {
        let x = encoding::domain_point(x)?;
        let mut act = vec![0.0; self.act_len()];
        Ok(self.forward_sample(&x, alpha, &mut act))
    }

    /// Evaluates one in-domain point, leaving activations in `act`:
    /// `[input | hidden1 | hidden2 | raw outputs]`.
    pub(crate) fn forward_sample(&self, x: &Vec3, alpha: Option<f64>, act: &mut [f64]) -> FieldSample {
        let h = self.cfg.hidden_width;
        let d = self.in_dim;
        let (input, rest) = act.split_at_mut(d);
        let (h1, rest) = rest.split_at_mut(h);
        let (h2, out) = rest.split_at_mut(h);
        for k in 0..3 {
            input[k] = 2.0 * x[k] - 1.0;
        }
        self.layout.encode_into(&self.values, x, alpha, &mut input[3..]);
        let [(_, _, w1, b1), (_, _, w2, b2), (_, _, w3, b3)] = self.mlp_blocks();
        dense(&self.values[w1..b1], &self.values[b1..b1 + h], input, h1, true);
        dense(&self.values[w2..b2], &self.values[b2..b2 + h], h1, h2, true);
        dense(&self.values[w3..b3], &self.values[b3..b3 + 3], h2, out, false);
        FieldSample {
            sigma: self.cfg.density_scale * softplus(out[0]),
            intensity: sigmoid(out[1]),
            drop_logit: out[2],
        }
    }

    /// Reverse pass for one sample. `d` holds the gradients w.r.t.
    /// (sigma, intensity, drop logit). MLP gradients go into `mlp_grad`
    /// (indexed from the MLP offset), encoding gradients into `sink`.
    pub(crate) fn backward_sample(
        &self,
        x: &Vec3,
        alpha: Option<f64>,
        act: &[f64],
        d: [f64; 3],
        mlp_grad: &mut [f64],
        sink: &mut impl encoding::ParamSink,
    ) -> Vec3 {
        let h = self.cfg.hidden_width;
        let n = self.in_dim;
        let input = &act[..n];
        let h1 = &act[n..n + h];
        let h2 = &act[n + h..n + 2 * h];
        let out = &act[n + 2 * h..n + 2 * h + 3];
        let s1 = sigmoid(out[1]);
        let d_out = [
            d[0] * self.cfg.density_scale * sigmoid(out[0]),
            d[1] * s1 * (1.0 - s1),
            d[2],
        ];
        let base = self.mlp_offset;
        let [(_, _, w1, b1), (_, _, w2, b2), (_, _, w3, b3)] = self.mlp_blocks();
        let mut dh2 = vec![0.0; h];
        dense_backward(&self.values[w3..b3], h2, &d_out, &mut dh2, &mut mlp_grad[w3 - base..b3 + 3 - base]);
        for (g, a) in dh2.iter_mut().zip(h2) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut dh1 = vec![0.0; h];
        dense_backward(&self.values[w2..b2], h1, &dh2, &mut dh1, &mut mlp_grad[w2 - base..b2 + h - base]);
        for (g, a) in dh1.iter_mut().zip(h1) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut din = vec![0.0; n];
        dense_backward(&self.values[w1..b1], input, &dh1, &mut din, &mut mlp_grad[w1 - base..b1 + h - base]);
        let mut gx = Vec3::new(2.0 * din[0], 2.0 * din[1], 2.0 * din[2]);
        gx += self.layout.encode_backward(&self.values, x, alpha, &din[3..], sink);
        gx
    }
}

/// `out = W in + b`, optionally followed by ReLU; `W` is row-major.
#[inline]
fn dense(w: &[f64], b: &[f64], input: &[f64], out: &mut [f64], relu: bool) {
    let cols = input.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (a, x) in row.iter().zip(input) {
            acc += a * x;
        }
        *o = if relu && acc < 0.0 { 0.0 } else { acc };
    }
}

/// Accumulates weight/bias gradients (laid out as `[W | b]` in `grad`) and
/// writes the input gradient to `d_in`.
#[inline]
fn dense_backward(w: &[f64], input: &[f64], d_out: &[f64], d_in: &mut [f64], grad: &mut [f64]) {
    let cols = input.len();
    let rows = d_out.len();
    for r in 0..rows {
        let g = d_out[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let grow = &mut grad[r * cols..(r + 1) * cols];
        for c in 0..cols {
            grow[c] += g * input[c];
            d_in[c] += g * row[c];
        }
        grad[rows * cols + r] += g;
    }
}
