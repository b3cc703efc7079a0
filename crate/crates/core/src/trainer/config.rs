use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::container::{format_key_values, parse_key_values};
use crate::encoder::EncoderConfig;
use crate::geometry::GridExtent;
use crate::masking::MaskParams;
use crate::renderer::RendererConfig;
use crate::scenegen::{RenderSettings, SceneParams};
use crate::temporal::{Strategy, TemporalConfig};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot parse `{value}`")]
    Parse { key: String, value: String },
    #[error("`{key}` = {value}: {reason}")]
    OutOfRange { key: String, value: String, reason: String },
    #[error("config: {0}")]
    Syntax(String),
    #[error("config file {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSection {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Frames per clip (`N+1`).
    pub window: usize,
    pub seed: u64,
    pub clips: usize,
    pub objects: usize,
    pub object_speed: f64,
    /// Forward ego speed in m/s.
    pub ego_speed: f64,
    pub focal: f64,
    pub mount_height: f64,
    pub lidar_samples: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingSection {
    /// Supervision pixels per view (`M`).
    pub supervision: usize,
    pub tau: f64,
    pub s_ray: usize,
    pub s_fill: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSection {
    pub channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub depth_bins: usize,
    pub depth_near: f64,
    pub depth_far: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSection {
    pub strategy: Strategy,
    pub heads: usize,
    pub points: usize,
    pub query_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RendererSection {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub hidden: usize,
    pub geo_features: usize,
    pub log_sharpness_init: f64,
    pub sdf_bias_init: f64,
    pub jitter: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Clips per optimization step.
    pub batch: usize,
    pub checkpoint_every: usize,
}

/// Full run configuration. Serialized as flat `section.key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub scene: SceneSection,
    pub grid: GridExtent,
    pub masking: MaskingSection,
    pub encoder: EncoderSection,
    pub temporal: TemporalSection,
    pub renderer: RendererSection,
    pub optimizer: OptimizerSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            scene: SceneSection {
                views: 2,
                width: 64,
                height: 48,
                window: 5,
                seed: 0,
                clips: 1,
                objects: 4,
                object_speed: 0.0,
                ego_speed: 1.0,
                focal: 40.0,
                mount_height: 0.6,
                lidar_samples: 600,
                dt: 0.5,
            },
            grid: GridExtent { min: [-8.0, -8.0, -1.0], max: [8.0, 8.0, 3.0], dims: [32, 32, 4] },
            masking: MaskingSection { supervision: 64, tau: 10.8, s_ray: 4, s_fill: 8, rho: 0.3 },
            encoder: EncoderSection {
                channels: 16,
                stage_channels: [8, 16, 16, 16],
                stage_strides: [2, 2, 1, 1],
                depth_bins: 16,
                depth_near: 0.5,
                depth_far: 12.0,
            },
            temporal: TemporalSection { strategy: Strategy::Both, heads: 2, points: 4, query_channels: 16 },
            renderer: RendererSection {
                samples: 32,
                near: 0.5,
                far: 12.0,
                lambda_rgb: 10.0,
                lambda_depth: 10.0,
                hidden: 32,
                geo_features: 8,
                log_sharpness_init: 1.0,
                sdf_bias_init: 0.5,
                jitter: true,
            },
            optimizer: OptimizerSection {
                lr: 2e-4,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                steps: 2000,
                batch: 1,
                checkpoint_every: 500,
            },
        }
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn split<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N], ConfigError> {
    let bad = || ConfigError::Parse { key: key.into(), value: value.into() };
    let parts: Vec<T> = value.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| bad())
}

/// Moves recognized keys out of the map into typed fields.
struct Reader(BTreeMap<String, String>);

impl Reader {
    fn scalar<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.0.remove(key) {
            *slot = v.parse().map_err(|_| ConfigError::Parse { key: key.into(), value: v })?;
        }
        Ok(())
    }

    fn list<T: FromStr, const N: usize>(&mut self, key: &str, slot: &mut [T; N]) -> Result<(), ConfigError> {
        if let Some(v) = self.0.remove(key) {
            *slot = split(key, &v)?;
        }
        Ok(())
    }
}

fn check(ok: bool, key: &str, value: impl Display, reason: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange { key: key.into(), value: value.to_string(), reason: reason.into() })
    }
}

impl Config {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let (s, m, e, t, r, o, g) = (&self.scene, &self.masking, &self.encoder, &self.temporal, &self.renderer, &self.optimizer, &self.grid);
        let entries: Vec<(&str, String)> = vec![
            ("scene.views", s.views.to_string()),
            ("scene.width", s.width.to_string()),
            ("scene.height", s.height.to_string()),
            ("scene.window", s.window.to_string()),
            ("scene.seed", s.seed.to_string()),
            ("scene.clips", s.clips.to_string()),
            ("scene.objects", s.objects.to_string()),
            ("scene.object_speed", s.object_speed.to_string()),
            ("scene.ego_speed", s.ego_speed.to_string()),
            ("scene.focal", s.focal.to_string()),
            ("scene.mount_height", s.mount_height.to_string()),
            ("scene.lidar_samples", s.lidar_samples.to_string()),
            ("scene.dt", s.dt.to_string()),
            ("grid.min", join(&g.min)),
            ("grid.max", join(&g.max)),
            ("grid.dims", join(&g.dims)),
            ("masking.supervision", m.supervision.to_string()),
            ("masking.tau", m.tau.to_string()),
            ("masking.s_ray", m.s_ray.to_string()),
            ("masking.s_fill", m.s_fill.to_string()),
            ("masking.rho", m.rho.to_string()),
            ("encoder.channels", e.channels.to_string()),
            ("encoder.stage_channels", join(&e.stage_channels)),
            ("encoder.stage_strides", join(&e.stage_strides)),
            ("encoder.depth_bins", e.depth_bins.to_string()),
            ("encoder.depth_near", e.depth_near.to_string()),
            ("encoder.depth_far", e.depth_far.to_string()),
            ("temporal.strategy", t.strategy.to_string()),
            ("temporal.heads", t.heads.to_string()),
            ("temporal.points", t.points.to_string()),
            ("temporal.query_channels", t.query_channels.to_string()),
            ("renderer.samples", r.samples.to_string()),
            ("renderer.near", r.near.to_string()),
            ("renderer.far", r.far.to_string()),
            ("renderer.lambda_rgb", r.lambda_rgb.to_string()),
            ("renderer.lambda_depth", r.lambda_depth.to_string()),
            ("renderer.hidden", r.hidden.to_string()),
            ("renderer.geo_features", r.geo_features.to_string()),
            ("renderer.log_sharpness_init", r.log_sharpness_init.to_string()),
            ("renderer.sdf_bias_init", r.sdf_bias_init.to_string()),
            ("renderer.jitter", r.jitter.to_string()),
            ("optimizer.lr", o.lr.to_string()),
            ("optimizer.weight_decay", o.weight_decay.to_string()),
            ("optimizer.beta1", o.beta1.to_string()),
            ("optimizer.beta2", o.beta2.to_string()),
            ("optimizer.eps", o.eps.to_string()),
            ("optimizer.steps", o.steps.to_string()),
            ("optimizer.batch", o.batch.to_string()),
            ("optimizer.checkpoint_every", o.checkpoint_every.to_string()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Overlays `map` on the defaults. Unknown keys are errors.
    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        let mut r = Reader(map);
        let s = &mut c.scene;
        r.scalar("scene.views", &mut s.views)?;
        r.scalar("scene.width", &mut s.width)?;
        r.scalar("scene.height", &mut s.height)?;
        r.scalar("scene.window", &mut s.window)?;
        r.scalar("scene.seed", &mut s.seed)?;
        r.scalar("scene.clips", &mut s.clips)?;
        r.scalar("scene.objects", &mut s.objects)?;
        r.scalar("scene.object_speed", &mut s.object_speed)?;
        r.scalar("scene.ego_speed", &mut s.ego_speed)?;
        r.scalar("scene.focal", &mut s.focal)?;
        r.scalar("scene.mount_height", &mut s.mount_height)?;
        r.scalar("scene.lidar_samples", &mut s.lidar_samples)?;
        r.scalar("scene.dt", &mut s.dt)?;
        r.list("grid.min", &mut c.grid.min)?;
        r.list("grid.max", &mut c.grid.max)?;
        r.list("grid.dims", &mut c.grid.dims)?;
        let m = &mut c.masking;
        r.scalar("masking.supervision", &mut m.supervision)?;
        r.scalar("masking.tau", &mut m.tau)?;
        r.scalar("masking.s_ray", &mut m.s_ray)?;
        r.scalar("masking.s_fill", &mut m.s_fill)?;
        r.scalar("masking.rho", &mut m.rho)?;
        let e = &mut c.encoder;
        r.scalar("encoder.channels", &mut e.channels)?;
        r.list("encoder.stage_channels", &mut e.stage_channels)?;
        r.list("encoder.stage_strides", &mut e.stage_strides)?;
        r.scalar("encoder.depth_bins", &mut e.depth_bins)?;
        r.scalar("encoder.depth_near", &mut e.depth_near)?;
        r.scalar("encoder.depth_far", &mut e.depth_far)?;
        let t = &mut c.temporal;
        r.scalar("temporal.strategy", &mut t.strategy)?;
        r.scalar("temporal.heads", &mut t.heads)?;
        r.scalar("temporal.points", &mut t.points)?;
        r.scalar("temporal.query_channels", &mut t.query_channels)?;
        let rr = &mut c.renderer;
        r.scalar("renderer.samples", &mut rr.samples)?;
        r.scalar("renderer.near", &mut rr.near)?;
        r.scalar("renderer.far", &mut rr.far)?;
        r.scalar("renderer.lambda_rgb", &mut rr.lambda_rgb)?;
        r.scalar("renderer.lambda_depth", &mut rr.lambda_depth)?;
        r.scalar("renderer.hidden", &mut rr.hidden)?;
        r.scalar("renderer.geo_features", &mut rr.geo_features)?;
        r.scalar("renderer.log_sharpness_init", &mut rr.log_sharpness_init)?;
        r.scalar("renderer.sdf_bias_init", &mut rr.sdf_bias_init)?;
        r.scalar("renderer.jitter", &mut rr.jitter)?;
        let o = &mut c.optimizer;
        r.scalar("optimizer.lr", &mut o.lr)?;
        r.scalar("optimizer.weight_decay", &mut o.weight_decay)?;
        r.scalar("optimizer.beta1", &mut o.beta1)?;
        r.scalar("optimizer.beta2", &mut o.beta2)?;
        r.scalar("optimizer.eps", &mut o.eps)?;
        r.scalar("optimizer.steps", &mut o.steps)?;
        r.scalar("optimizer.batch", &mut o.batch)?;
        r.scalar("optimizer.checkpoint_every", &mut o.checkpoint_every)?;
        if let Some(k) = r.0.into_keys().next() {
            return Err(ConfigError::UnknownKey(k));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let map = parse_key_values(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        Self::from_map(map)
    }

    pub fn serialize(&self) -> String {
        format_key_values(&self.to_map())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    /// SHA-256 of the serialized form, lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.serialize().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (s, m, e, t, r, o, g) = (&self.scene, &self.masking, &self.encoder, &self.temporal, &self.renderer, &self.optimizer, &self.grid);
        check((1..=16).contains(&s.views), "scene.views", s.views, "must be in 1..=16")?;
        check((4..=4096).contains(&s.width), "scene.width", s.width, "must be in 4..=4096")?;
        check((4..=4096).contains(&s.height), "scene.height", s.height, "must be in 4..=4096")?;
        check((1..=16).contains(&s.window), "scene.window", s.window, "must be in 1..=16")?;
        check(s.clips >= 1, "scene.clips", s.clips, "must be positive")?;
        check(s.objects <= 64, "scene.objects", s.objects, "at most 64")?;
        check(s.object_speed >= 0.0 && s.object_speed <= 30.0, "scene.object_speed", s.object_speed, "must be in [0, 30]")?;
        check(s.ego_speed.abs() <= 30.0, "scene.ego_speed", s.ego_speed, "must be in [-30, 30]")?;
        check(s.focal > 0.0 && s.focal.is_finite(), "scene.focal", s.focal, "must be positive")?;
        check(s.mount_height.is_finite(), "scene.mount_height", s.mount_height, "must be finite")?;
        check(s.lidar_samples >= 1, "scene.lidar_samples", s.lidar_samples, "must be positive")?;
        check(s.dt > 0.0 && s.dt.is_finite(), "scene.dt", s.dt, "must be positive")?;
        for a in 0..3 {
            check(g.min[a] < g.max[a], "grid.max", join(&g.max), "must exceed grid.min on every axis")?;
            check(g.dims[a] >= 1 && g.dims[a] <= 512, "grid.dims", join(&g.dims), "each in 1..=512")?;
        }
        check(m.supervision >= 1, "masking.supervision", m.supervision, "must be positive")?;
        check(m.tau > 0.0, "masking.tau", m.tau, "must be positive")?;
        check(m.s_ray >= 1, "masking.s_ray", m.s_ray, "must be positive")?;
        check(m.s_fill >= 1, "masking.s_fill", m.s_fill, "must be positive")?;
        check((0.0..=1.0).contains(&m.rho), "masking.rho", m.rho, "must be in [0, 1]")?;
        check(e.channels >= 1, "encoder.channels", e.channels, "must be positive")?;
        check(e.stage_channels.iter().all(|&c| c >= 1), "encoder.stage_channels", join(&e.stage_channels), "all positive")?;
        check(e.stage_strides.iter().all(|&c| (1..=4).contains(&c)), "encoder.stage_strides", join(&e.stage_strides), "each in 1..=4")?;
        let stride: usize = e.stage_strides.iter().product();
        check(s.width % stride == 0 && s.height % stride == 0, "encoder.stage_strides", join(&e.stage_strides), "total stride must divide the image size")?;
        check(e.depth_bins >= 2, "encoder.depth_bins", e.depth_bins, "at least 2")?;
        check(e.depth_near > 0.0 && e.depth_near < e.depth_far, "encoder.depth_near", e.depth_near, "must be in (0, depth_far)")?;
        check(t.heads >= 1 && t.points >= 1, "temporal.heads", t.heads, "heads and points must be positive")?;
        check(t.query_channels >= 2 && t.query_channels % t.heads == 0, "temporal.query_channels", t.query_channels, "must be ≥ 2 and divisible by heads")?;
        check((t.query_channels / 2) % t.heads == 0, "temporal.query_channels", t.query_channels, "half must be divisible by heads")?;
        check((self.encoder.channels * g.dims[2]).is_multiple_of(t.heads), "temporal.heads", t.heads, "must divide encoder.channels × grid.dims z")?;
        check(t.strategy != Strategy::WarpCat || s.window >= 2, "temporal.strategy", t.strategy, "warp-cat needs a window of at least 2")?;
        check(t.strategy == Strategy::None || s.window >= 2, "temporal.strategy", t.strategy, "reconstruction needs a window of at least 2")?;
        check(r.samples >= 2, "renderer.samples", r.samples, "at least 2")?;
        check(r.near > 0.0 && r.near < r.far, "renderer.near", r.near, "must be in (0, far)")?;
        check(r.lambda_rgb >= 0.0 && r.lambda_depth >= 0.0, "renderer.lambda_rgb", r.lambda_rgb, "weights must be non-negative")?;
        check(r.hidden >= 1, "renderer.hidden", r.hidden, "must be positive")?;
        check(r.log_sharpness_init.abs() <= 10.0, "renderer.log_sharpness_init", r.log_sharpness_init, "must be in [-10, 10]")?;
        check(r.sdf_bias_init.is_finite(), "renderer.sdf_bias_init", r.sdf_bias_init, "must be finite")?;
        check(o.lr > 0.0 && o.lr < 1.0, "optimizer.lr", o.lr, "must be in (0, 1)")?;
        check((0.0..1.0).contains(&o.weight_decay), "optimizer.weight_decay", o.weight_decay, "must be in [0, 1)")?;
        check((0.0..1.0).contains(&o.beta1), "optimizer.beta1", o.beta1, "must be in [0, 1)")?;
        check((0.0..1.0).contains(&o.beta2), "optimizer.beta2", o.beta2, "must be in [0, 1)")?;
        check(o.eps > 0.0, "optimizer.eps", o.eps, "must be positive")?;
        check(o.batch >= 1, "optimizer.batch", o.batch, "must be positive")?;
        check(o.checkpoint_every >= 1, "optimizer.checkpoint_every", o.checkpoint_every, "must be positive")?;
        Ok(())
    }

    pub fn mask_params(&self) -> MaskParams {
        MaskParams { s_ray: self.masking.s_ray, s_fill: self.masking.s_fill, rho: self.masking.rho }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            stage_channels: e.stage_channels,
            stage_strides: e.stage_strides,
            channels: e.channels,
            depth_bins: e.depth_bins,
            depth_near: e.depth_near,
            depth_far: e.depth_far,
            extent: self.grid,
        }
    }

    pub fn temporal_config(&self) -> TemporalConfig {
        let t = &self.temporal;
        TemporalConfig {
            strategy: t.strategy,
            window: self.scene.window,
            heads: t.heads,
            points: t.points,
            channels: self.encoder.channels,
            query_channels: t.query_channels,
            extent: self.grid,
        }
    }

    pub fn renderer_config(&self) -> RendererConfig {
        let r = &self.renderer;
        RendererConfig {
            samples: r.samples,
            near: r.near,
            far: r.far,
            lambda_rgb: r.lambda_rgb,
            lambda_depth: r.lambda_depth,
            hidden: r.hidden,
            geo_features: r.geo_features,
            log_sharpness_init: r.log_sharpness_init,
            sdf_bias_init: r.sdf_bias_init,
            channels: self.encoder.channels,
            extent: self.grid,
        }
    }

    pub fn render_settings(&self, seed: u64) -> RenderSettings {
        RenderSettings {
            width: self.scene.width,
            height: self.scene.height,
            lidar_samples_per_view: self.scene.lidar_samples,
            seed,
            dt: self.scene.dt,
            extent: self.grid,
            ..RenderSettings::default()
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams { objects: self.scene.objects, object_speed: self.scene.object_speed, ..SceneParams::default() }
    }
}
