use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use thiserror::Error;

use super::{trace_ray, AnalyticScene};
use crate::container::{format_key_values, io_err, parse_key_values, write_atomic, Blob, BlobError};
use crate::geometry::{generate_ray, Camera, EgoPose, GeometryError, GridExtent, Rigid};
use crate::rng;

#[derive(Debug, Error)]
pub enum ClipError {
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid clip: {0}")]
    Invalid(String),
}

/// RGB image in `[0,1]`, row-major `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One emulated range return: pixel and ray distance to the first hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub col: u32,
    pub row: u32,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pose: EgoPose,
    pub time: f64,
    /// One image per camera.
    pub images: Vec<Image>,
    /// Sparse depth per camera, sorted by (row, col).
    pub depths: Vec<Vec<DepthSample>>,
}

/// `N+1` timestamps of `V` posed images with sparse depth.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewClip {
    pub cameras: Vec<Camera>,
    pub frames: Vec<Frame>,
    pub settings: RenderSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub lidar_samples_per_view: usize,
    pub seed: u64,
    /// Rays travelling further than this are misses.
    pub max_range: f64,
    /// Seconds between timestamps.
    pub dt: f64,
    pub sky: [f64; 3],
    /// Ego-centric region the scene is laid out for.
    pub extent: GridExtent,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            lidar_samples_per_view: 600,
            seed: 0,
            max_range: 40.0,
            dt: 0.5,
            sky: [0.55, 0.7, 0.9],
            extent: GridExtent { min: [-8.0, -8.0, -1.0], max: [8.0, 8.0, 3.0], dims: [32, 32, 4] },
        }
    }
}

impl MultiViewClip {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn window(&self) -> usize {
        self.frames.len()
    }

    /// The last `len` frames (the current frame and its predecessors).
    pub fn tail(&self, len: usize) -> Result<MultiViewClip, ClipError> {
        if len == 0 || len > self.frames.len() {
            return Err(ClipError::Invalid(format!("window {len} of a {}-frame clip", self.frames.len())));
        }
        Ok(MultiViewClip {
            cameras: self.cameras.clone(),
            frames: self.frames[self.frames.len() - len..].to_vec(),
            settings: self.settings.clone(),
        })
    }
}

/// `views` cameras spread in yaw around the ego heading, `mount_height` above
/// the ego origin.
pub fn default_cameras(views: usize, width: usize, height: usize, focal: f64, mount_height: f64) -> Result<Vec<Camera>, GeometryError> {
    let spacing = (std::f64::consts::TAU / views as f64).min(0.9);
    (0..views)
        .map(|i| {
            let yaw = (i as f64 - (views as f64 - 1.0) / 2.0) * spacing;
            Camera::mounted(focal, focal, width, height, [0.0, 0.0, mount_height], -yaw, 0.05)
        })
        .collect()
}

/// Ego driving straight along world +x at `speed` m/s.
pub fn linear_trajectory(frames: usize, speed: f64, dt: f64) -> Vec<EgoPose> {
    (0..frames).map(|k| EgoPose::new(Rigid::translation([speed * dt * k as f64, 0.0, 0.0]), k)).collect()
}

fn render_view(
    scene: &AnalyticScene,
    camera: &Camera,
    pose: &EgoPose,
    time: f64,
    settings: &RenderSettings,
    stream: u64,
) -> Result<(Image, Vec<DepthSample>), ClipError> {
    let (w, h) = (settings.width, settings.height);
    let traced: Vec<_> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (col, row) = (i % w, i / w);
            let ray = generate_ray(camera, (col as f64 + 0.5, row as f64 + 0.5), pose)?;
            Ok(trace_ray(scene, &ray, time, settings.max_range))
        })
        .collect::<Result<_, GeometryError>>()?;

    let mut image = Image::new(w, h);
    let mut hits = Vec::new();
    for (i, hit) in traced.iter().enumerate() {
        let (col, row) = (i % w, i / w);
        match hit {
            Some(hit) => {
                image.set(col, row, hit.albedo);
                hits.push(DepthSample { col: col as u32, row: row as u32, depth: hit.depth });
            }
            None => image.set(col, row, settings.sky),
        }
    }
    if hits.is_empty() {
        log::warn!("camera {} sees no geometry at frame {}", stream, pose.index);
    }
    let mut rng = rng::stream(settings.seed, &[pose.index as u64, stream]);
    let take = settings.lidar_samples_per_view.min(hits.len());
    let mut chosen = sample(&mut rng, hits.len(), take).into_vec();
    chosen.sort_unstable();
    Ok((image, chosen.into_iter().map(|k| hits[k]).collect()))
}

/// Renders every camera at every pose of `trajectory`; timestamp `k` is at
/// `k·dt` seconds.
pub fn render_clip(
    scene: &AnalyticScene,
    cameras: &[Camera],
    trajectory: &[EgoPose],
    settings: &RenderSettings,
) -> Result<MultiViewClip, ClipError> {
    if trajectory.is_empty() || cameras.is_empty() || settings.width == 0 || settings.height == 0 {
        return Err(ClipError::Invalid("empty trajectory, camera rig or image".into()));
    }
    if cameras.iter().any(|c| c.width != settings.width || c.height != settings.height) {
        return Err(ClipError::Invalid("camera size differs from render size".into()));
    }
    let mut frames = Vec::with_capacity(trajectory.len());
    for (k, pose) in trajectory.iter().enumerate() {
        let pose = EgoPose::new(pose.world_from_ego, k);
        let time = k as f64 * settings.dt;
        let mut images = Vec::with_capacity(cameras.len());
        let mut depths = Vec::with_capacity(cameras.len());
        for (v, cam) in cameras.iter().enumerate() {
            let (img, d) = render_view(scene, cam, &pose, time, settings, v as u64)?;
            images.push(img);
            depths.push(d);
        }
        frames.push(Frame { pose, time, images, depths });
    }
    Ok(MultiViewClip { cameras: cameras.to_vec(), frames, settings: settings.clone() })
}

fn put_rigid(blob: &mut Blob, prefix: &str, r: &Rigid) {
    blob.put_f64(format!("{prefix}.rotation"), &[3, 3], r.rotation.iter().flatten().copied().collect());
    blob.put_f64(format!("{prefix}.translation"), &[3], r.translation.to_vec());
}

fn get_rigid(blob: &Blob, prefix: &str) -> Result<Rigid, ClipError> {
    let r = blob.f64s_shaped(&format!("{prefix}.rotation"), &[3, 3])?;
    let t = blob.f64s_shaped(&format!("{prefix}.translation"), &[3])?;
    let rotation = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
    Ok(Rigid::new(rotation, [t[0], t[1], t[2]])?)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_vec(s: &str) -> Result<Vec<f64>, ClipError> {
    s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| ClipError::Invalid(format!("`{s}`: {e}")))).collect()
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, ClipError> {
    let raw = map.get(key).ok_or_else(|| ClipError::Invalid(format!("manifest lacks `{key}`")))?;
    raw.parse().map_err(|_| ClipError::Invalid(format!("manifest `{key}` = `{raw}` is malformed")))
}

impl MultiViewClip {
    fn manifest(&self) -> BTreeMap<String, String> {
        let s = &self.settings;
        let mut m = BTreeMap::new();
        m.insert("format".into(), "mv4d-clip".into());
        m.insert("version".into(), "1".into());
        m.insert("views".into(), self.views().to_string());
        m.insert("frames".into(), self.frames.len().to_string());
        m.insert("width".into(), s.width.to_string());
        m.insert("height".into(), s.height.to_string());
        m.insert("seed".into(), s.seed.to_string());
        m.insert("lidar_samples_per_view".into(), s.lidar_samples_per_view.to_string());
        m.insert("max_range".into(), s.max_range.to_string());
        m.insert("dt".into(), s.dt.to_string());
        m.insert("sky".into(), fmt_vec(&s.sky));
        m.insert("extent.min".into(), fmt_vec(&s.extent.min));
        m.insert("extent.max".into(), fmt_vec(&s.extent.max));
        m.insert("extent.dims".into(), s.extent.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","));
        m
    }

    /// Writes `manifest.txt`, `cameras.bin` and `frame_NNN.bin` into `dir`.
    pub fn save(&self, dir: &Path, dump_ppm: bool) -> Result<(), ClipError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_atomic(&dir.join("manifest.txt"), format_key_values(&self.manifest()).as_bytes())?;

        let mut cams = Blob::new();
        let v = self.views();
        cams.put_f64("intrinsics", &[v, 4], self.cameras.iter().flat_map(|c| [c.fx, c.fy, c.cx, c.cy]).collect());
        for (i, c) in self.cameras.iter().enumerate() {
            put_rigid(&mut cams, &format!("cam_from_ego.{i}"), &c.cam_from_ego);
        }
        cams.save(&dir.join("cameras.bin"))?;

        for (k, frame) in self.frames.iter().enumerate() {
            let mut b = Blob::new();
            b.put_f64("time", &[], vec![frame.time]);
            put_rigid(&mut b, "pose", &frame.pose.world_from_ego);
            for (i, img) in frame.images.iter().enumerate() {
                b.put_f64(format!("image.{i}"), &[img.height, img.width, 3], img.data.clone());
            }
            for (i, d) in frame.depths.iter().enumerate() {
                b.put_u32(format!("depth.{i}.pixels"), &[d.len(), 2], d.iter().flat_map(|s| [s.col, s.row]).collect());
                b.put_f64(format!("depth.{i}.values"), &[d.len()], d.iter().map(|s| s.depth).collect());
            }
            b.save(&dir.join(format!("frame_{k:03}.bin")))?;
            if dump_ppm {
                for (i, img) in frame.images.iter().enumerate() {
                    write_ppm(&dir.join(format!("frame_{k:03}_view_{i}.ppm")), img)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ClipError> {
        let text = fs::read_to_string(dir.join("manifest.txt")).map_err(|e| io_err(&dir.join("manifest.txt"), e))?;
        let m = parse_key_values(&text)?;
        if m.get("format").map(String::as_str) != Some("mv4d-clip") {
            return Err(ClipError::Invalid("manifest is not an mv4d-clip".into()));
        }
        let views: usize = field(&m, "views")?;
        let frames: usize = field(&m, "frames")?;
        let vec3 = |key: &str| -> Result<[f64; 3], ClipError> {
            let v = parse_vec(m.get(key).ok_or_else(|| ClipError::Invalid(format!("manifest lacks `{key}`")))?)?;
            v.try_into().map_err(|_| ClipError::Invalid(format!("`{key}` needs 3 values")))
        };
        let dims: Vec<usize> = m
            .get("extent.dims")
            .ok_or_else(|| ClipError::Invalid("manifest lacks `extent.dims`".into()))?
            .split(',')
            .map(|d| d.trim().parse().map_err(|_| ClipError::Invalid("bad extent.dims".into())))
            .collect::<Result<_, _>>()?;
        let settings = RenderSettings {
            width: field(&m, "width")?,
            height: field(&m, "height")?,
            lidar_samples_per_view: field(&m, "lidar_samples_per_view")?,
            seed: field(&m, "seed")?,
            max_range: field(&m, "max_range")?,
            dt: field(&m, "dt")?,
            sky: vec3("sky")?,
            extent: GridExtent {
                min: vec3("extent.min")?,
                max: vec3("extent.max")?,
                dims: dims.try_into().map_err(|_| ClipError::Invalid("extent.dims needs 3 values".into()))?,
            },
        };

        let cams = Blob::load(&dir.join("cameras.bin"))?;
        let intr = cams.f64s_shaped("intrinsics", &[views, 4])?;
        let cameras = (0..views)
            .map(|i| {
                let k = &intr[4 * i..4 * i + 4];
                let ext = get_rigid(&cams, &format!("cam_from_ego.{i}"))?;
                Ok(Camera::new(k[0], k[1], k[2], k[3], settings.width, settings.height, ext)?)
            })
            .collect::<Result<Vec<_>, ClipError>>()?;

        let mut out = Vec::with_capacity(frames);
        for k in 0..frames {
            let b = Blob::load(&dir.join(format!("frame_{k:03}.bin")))?;
            let time = b.f64s_shaped("time", &[])?[0];
            let pose = EgoPose::new(get_rigid(&b, "pose")?, k);
            let mut images = Vec::with_capacity(views);
            let mut depths = Vec::with_capacity(views);
            for i in 0..views {
                let data = b.f64s_shaped(&format!("image.{i}"), &[settings.height, settings.width, 3])?.to_vec();
                images.push(Image { width: settings.width, height: settings.height, data });
                let (shape, px) = b.u32s(&format!("depth.{i}.pixels"))?;
                let n = shape.first().copied().unwrap_or(0);
                let vals = b.f64s_shaped(&format!("depth.{i}.values"), &[n])?;
                depths.push((0..n).map(|s| DepthSample { col: px[2 * s], row: px[2 * s + 1], depth: vals[s] }).collect());
            }
            out.push(Frame { pose, time, images, depths });
        }
        Ok(Self { cameras, frames: out, settings })
    }
}

/// Binary 8-bit PPM.
pub fn write_ppm(path: &Path, image: &Image) -> Result<(), ClipError> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_atomic(path, &bytes)?;
    Ok(())
}
