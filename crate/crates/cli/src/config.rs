//! Flat `key=value` run configuration with dotted section names.

use std::fmt;

use geonlf_core::field::EncodingKind;
use geonlf_core::geo::TemperatureSchedule;
use geonlf_core::trainer::TrainConfig;
use geonlf_core::ScannerConfig;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

/// Settings of the stand-alone geometric registration.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisterConfig {
    pub steps: usize,
    pub window: usize,
    pub lr_trans: f64,
    pub lr_rot: f64,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self { steps: 1000, window: 2, lr_trans: 1e-2, lr_rot: 2e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scanner: ScannerConfig,
    pub register: RegisterConfig,
    pub icp: IcpConfig,
}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("cannot parse '{s}' as {}", stringify!($t)))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

numeric_value!(usize, u64, f64, bool);

impl Value for EncodingKind {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "hybrid" => Ok(EncodingKind::Hybrid),
            "sinusoidal" => Ok(EncodingKind::Sinusoidal),
            _ => Err(format!("unknown encoding '{s}' (hybrid|sinusoidal)")),
        }
    }
    fn show(&self) -> String {
        match self {
            EncodingKind::Hybrid => "hybrid".into(),
            EncodingKind::Sinusoidal => "sinusoidal".into(),
        }
    }
}

impl Value for TemperatureSchedule {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(TemperatureSchedule::Linear),
            "exponential" => Ok(TemperatureSchedule::Exponential),
            _ => Err(format!("unknown schedule '{s}' (linear|exponential)")),
        }
    }
    fn show(&self) -> String {
        match self {
            TemperatureSchedule::Linear => "linear".into(),
            TemperatureSchedule::Exponential => "exponential".into(),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($path:ident).+),* $(,)?) => {
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(c: &mut RunConfig, key: &str, v: &str) -> Result<(), String> {
            match key {
                $($key => c.$($path).+ = Value::parse(v)?,)*
                _ => return Err(format!("unknown key '{key}'")),
            }
            Ok(())
        }

        fn get_key(c: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(c.$($path).+.show()),)*
                _ => None,
            }
        }
    };
}

config_keys! {
    "train.iterations" => train.iterations,
    "train.rays_per_batch" => train.rays_per_batch,
    "train.num_samples" => train.num_samples,
    "train.t_near" => train.t_near,
    "train.far_margin" => train.far_margin,
    "train.early_stop" => train.early_stop,
    "train.stratified" => train.stratified,
    "train.lr_field_start" => train.lr_field.start,
    "train.lr_field_end" => train.lr_field.end,
    "train.lr_trans_start" => train.lr_trans.start,
    "train.lr_trans_end" => train.lr_trans.end,
    "train.lr_rot_start" => train.lr_rot.start,
    "train.lr_rot_end" => train.lr_rot.end,
    "train.lambda_d" => train.weights.depth,
    "train.lambda_i" => train.weights.intensity,
    "train.lambda_p" => train.weights.raydrop,
    "train.lambda_n" => train.weights.normal,
    "train.lambda_c" => train.weights.cd,
    "train.top_k" => train.top_k,
    "train.w0_start" => train.w0_start,
    "train.w0_end" => train.w0_end,
    "train.c2f_start" => train.c2f_start,
    "train.c2f_end" => train.c2f_end,
    "train.alt_ratio_start" => train.alt_ratio_start,
    "train.alt_ratio_end" => train.alt_ratio_end,
    "train.m1" => train.m1,
    "train.geo_lr_scale" => train.geo_lr_scale,
    "train.graph_window" => train.graph_window,
    "train.cd_every" => train.cd_every,
    "train.cd_points" => train.cd_points,
    "train.normal_k" => train.normal_k,
    "train.selective_reweighting" => train.selective_reweighting,
    "train.geometric_phase" => train.geometric_phase,
    "train.shared_pose_state" => train.shared_pose_state,
    "train.seed" => train.seed,
    "field.hidden_width" => train.field.hidden_width,
    "field.density_scale" => train.field.density_scale,
    "field.encoding" => train.field.encoding.kind,
    "field.levels" => train.field.encoding.levels,
    "field.base_resolution" => train.field.encoding.base_resolution,
    "field.growth" => train.field.encoding.growth,
    "field.features_per_level" => train.field.encoding.features_per_level,
    "field.hash_table_size" => train.field.encoding.hash_table_size,
    "field.planar_resolution" => train.field.encoding.planar_resolution,
    "field.planar_levels" => train.field.encoding.planar_levels,
    "field.planar_channels" => train.field.encoding.planar_channels,
    "field.sinusoidal_levels" => train.field.encoding.sinusoidal_levels,
    "rcd.t0" => train.rcd.t0,
    "rcd.schedule" => train.rcd.schedule,
    "rcd.voxel_size" => train.rcd.voxel_size,
    "rcd.detach_weights" => train.rcd.detach_weights,
    "scanner.height" => scanner.height,
    "scanner.width" => scanner.width,
    "scanner.fov_up_deg" => scanner.fov_up_deg,
    "scanner.fov_down_deg" => scanner.fov_down_deg,
    "scanner.max_range" => scanner.max_range,
    "scanner.drop_prob_base" => scanner.drop_prob_base,
    "register.steps" => register.steps,
    "register.window" => register.window,
    "register.lr_trans" => register.lr_trans,
    "register.lr_rot" => register.lr_rot,
    "icp.max_iters" => icp.max_iters,
    "icp.tol" => icp.tol,
}

impl RunConfig {
    /// Applies `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError { line: k + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            set_key(self, key.trim(), value.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        set_key(self, key, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        get_key(self, key)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key}={}", get_key(self, key).expect("listed key"))?;
        }
        Ok(())
    }
}
