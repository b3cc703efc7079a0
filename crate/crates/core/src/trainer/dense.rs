use std::fs;
use std::path::Path;

use super::config::Config;
use super::pipeline::{forward_pipeline, ForwardOptions, PipelineError};
use super::train::TrainError;
use crate::container::{io_err, write_atomic};
use crate::diffcore::Tape;
use crate::geometry::{generate_ray, EgoPose};
use crate::params::ParamSet;
use crate::renderer::{render_rays, sample_rays};
use crate::rng;
use crate::scenegen::{write_ppm, Image, MultiViewClip};

const RENDER_TAG: u64 = 0x4e4d;
/// Rays per render batch.
const CHUNK: usize = 1024;

pub struct RenderedView {
    pub view: usize,
    pub rgb: Image,
    /// Ray distance per pixel, row-major.
    pub depth: Vec<f64>,
    pub weight_sum: Vec<f64>,
}

/// Renders every pixel of every view of the frame the decoder reconstructs
/// (drawn from `seed`). Returns the views and the dropped window index.
pub fn render_reconstruction(clip: &MultiViewClip, cfg: &Config, params: &ParamSet, seed: u64) -> Result<(Vec<RenderedView>, usize), TrainError> {
    let stage = |e: crate::diffcore::DiffError| PipelineError::Stage { stage: "render", detail: e.to_string() };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false).map_err(stage)?;
    let mut rng = rng::stream(seed, &[RENDER_TAG]);
    let fwd = forward_pipeline(&mut tape, clip, cfg, &bound, &mut rng, &ForwardOptions::default())?;
    let rcfg = cfg.renderer_config();
    let (w, h) = (clip.settings.width, clip.settings.height);
    let mut views = Vec::new();
    for (v, cam) in clip.cameras.iter().enumerate() {
        let rays = (0..w * h)
            .map(|i| generate_ray(cam, ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5), &EgoPose::identity()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        let mut rgb = Image::new(w, h);
        let (mut depth, mut weight_sum) = (Vec::with_capacity(w * h), Vec::with_capacity(w * h));
        for (c, chunk) in rays.chunks(CHUNK).enumerate() {
            let set = sample_rays::<rand_chacha::ChaCha8Rng>(chunk.to_vec(), &rcfg, None).map_err(|e| TrainError::Invalid(e.to_string()))?;
            let mut t = Tape::new();
            let b = params.bind(&mut t, false).map_err(stage)?;
            let voxel = t.constant(tape.value(fwd.reconstructed).clone()).map_err(stage)?;
            let out = render_rays(&mut t, voxel, &set, &rcfg, &b, None).map_err(stage)?;
            let n = chunk.len();
            let col = t.value(out.rgb).data();
            for i in 0..n {
                let p = c * CHUNK + i;
                rgb.set(p % w, p / w, [col[i], col[n + i], col[2 * n + i]]);
            }
            depth.extend_from_slice(t.value(out.depth).data());
            let ws = t.value(out.weights);
            let k = rcfg.samples;
            weight_sum.extend((0..n).map(|r| ws.data()[r * k..(r + 1) * k].iter().sum::<f64>()));
        }
        views.push(RenderedView { view: v, rgb, depth, weight_sum });
    }
    Ok((views, fwd.diagnostics.drop))
}

fn depth_image(depth: &[f64], w: usize, h: usize, near: f64, far: f64) -> Image {
    let mut im = Image::new(w, h);
    for (i, &d) in depth.iter().enumerate() {
        let g = ((d - near) / (far - near)).clamp(0.0, 1.0);
        im.set(i % w, i / w, [g; 3]);
    }
    im
}

/// Writes `rgb_v{v}.ppm`, `depth_v{v}.ppm`, `target_v{v}.ppm` and
/// `render.csv` (per view: color L1 over all pixels, depth error over the
/// stored range samples, mean weight sum).
pub fn write_render(clip: &MultiViewClip, cfg: &Config, params: &ParamSet, seed: u64, out: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let (views, drop) = render_reconstruction(clip, cfg, params, seed)?;
    let frame = &clip.frames[clip.window() - cfg.scene.window + drop];
    let (w, h) = (clip.settings.width, clip.settings.height);
    let mut csv = String::from("view,frame,rgb_l1,depth_mae,mean_weight_sum\n");
    for v in &views {
        let target = &frame.images[v.view];
        write_ppm(&out.join(format!("rgb_v{}.ppm", v.view)), &v.rgb)?;
        write_ppm(&out.join(format!("target_v{}.ppm", v.view)), target)?;
        write_ppm(&out.join(format!("depth_v{}.ppm", v.view)), &depth_image(&v.depth, w, h, cfg.renderer.near, cfg.renderer.far))?;
        let l1 = v.rgb.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / (w * h) as f64;
        let samples = &frame.depths[v.view];
        let mae = samples.iter().map(|s| (v.depth[s.row as usize * w + s.col as usize] - s.depth).abs()).sum::<f64>() / samples.len().max(1) as f64;
        let ws = v.weight_sum.iter().sum::<f64>() / v.weight_sum.len() as f64;
        csv.push_str(&format!("{},{},{},{},{}\n", v.view, frame.pose.index, l1, mae, ws));
    }
    Ok(write_atomic(&out.join("render.csv"), csv.as_bytes())?)
}
