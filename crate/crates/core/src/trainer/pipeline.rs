use std::fmt::Display;

use rand::Rng;

use super::config::Config;
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::encoder::{self, encode_frames, LiftIndex};
use crate::masking::{apply_mask, mask_frame, FrameMasks, PixelMask};
use crate::params::{Bound, ParamSet};
use crate::renderer::{self, render_loss};
use crate::rng;
use crate::scenegen::{Image, MultiViewClip};
use crate::temporal::{self, choose_drop_index, reconstruct_dropped, Strategy};

const INIT_TAG: u64 = 0x1a17;
const EVAL_TAG: u64 = 0xe7a1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("clip does not match config: {0}")]
    Mismatch(String),
    #[error("{stage}: {detail}")]
    Stage { stage: &'static str, detail: String },
    #[error("{stage}: non-finite loss")]
    NonFinite { stage: &'static str },
}

fn at<E: Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, detail: e.to_string() }
}

/// Every learnable tensor of the encoder, decoder and renderer.
pub fn init_params(cfg: &Config, seed: u64) -> ParamSet {
    let mut p = encoder::init_params(&cfg.encoder_config(), &mut rng::stream(seed, &[INIT_TAG, 0]));
    p.extend(temporal::init_params(&cfg.temporal_config(), &mut rng::stream(seed, &[INIT_TAG, 1])));
    p.extend(renderer::init_params(&cfg.renderer_config(), &mut rng::stream(seed, &[INIT_TAG, 2])));
    p
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Stratified jitter of ray samples.
    pub jitter: bool,
    /// Normals to condition colors on instead of finite differences.
    pub normals: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub loss: f64,
    pub rgb_term: f64,
    pub depth_term: f64,
    pub mean_weight_sum: f64,
    pub depth_mae: f64,
    /// Mean masked fraction over every image of the window.
    pub masked_fraction: f64,
    pub drop: usize,
    pub rays: usize,
}

pub struct Forward {
    pub loss: Var,
    pub diagnostics: Diagnostics,
    /// Reconstructed `[C, Z, H, W]` grid of the dropped frame.
    pub reconstructed: Var,
    pub masks: Vec<FrameMasks>,
    pub normals: Tensor,
}

fn check_clip(clip: &MultiViewClip, cfg: &Config) -> Result<(), PipelineError> {
    let s = &cfg.scene;
    if clip.views() != s.views {
        return Err(PipelineError::Mismatch(format!("{} views, config expects {}", clip.views(), s.views)));
    }
    if clip.settings.width != s.width || clip.settings.height != s.height {
        return Err(PipelineError::Mismatch(format!(
            "{}×{} images, config expects {}×{}",
            clip.settings.width, clip.settings.height, s.width, s.height
        )));
    }
    if clip.window() < s.window {
        return Err(PipelineError::Mismatch(format!("{} frames, config window is {}", clip.window(), s.window)));
    }
    Ok(())
}

/// Masks every frame of the window ending at the clip's last frame, drops
/// one, reconstructs it from the others and renders it against its own
/// supervision pixels. Only the frames the decoder reads are encoded.
pub fn forward_pipeline<R: Rng + ?Sized>(
    tape: &mut Tape,
    clip: &MultiViewClip,
    cfg: &Config,
    params: &Bound,
    rng: &mut R,
    opts: &ForwardOptions,
) -> Result<Forward, PipelineError> {
    check_clip(clip, cfg)?;
    let window = cfg.scene.window;
    let frames = &clip.frames[clip.window() - window..];
    let mp = cfg.mask_params();
    let masks: Vec<FrameMasks> = frames
        .iter()
        .map(|f| mask_frame(f, cfg.masking.tau, cfg.masking.supervision, &mp, rng))
        .collect::<Result<_, _>>()
        .map_err(at("masking"))?;
    let all: Vec<&PixelMask> = masks.iter().flat_map(|m| &m.masks).collect();
    let masked_fraction = all.iter().map(|m| m.masked_fraction()).sum::<f64>() / all.len() as f64;

    let drop = choose_drop_index(window, rng);
    let tcfg = cfg.temporal_config();
    let needed: Vec<usize> = if tcfg.strategy == Strategy::None { vec![drop] } else { (0..window).filter(|&j| j != drop).collect() };
    let ecfg = cfg.encoder_config();
    let lift = LiftIndex::new(&clip.cameras, &ecfg);
    let images: Vec<Vec<Image>> = needed
        .iter()
        .map(|&j| frames[j].images.iter().zip(&masks[j].masks).map(|(im, m)| apply_mask(im, m)).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()
        .map_err(at("masking"))?;
    let pixel_masks: Vec<Vec<PixelMask>> = needed.iter().map(|&j| masks[j].masks.clone()).collect();
    let encoded = encode_frames(tape, &images, &pixel_masks, &lift, &ecfg, params).map_err(at("encoder"))?;

    let placeholder = tape.constant(Tensor::zeros(&ecfg.voxel_shape())).map_err(at("encoder"))?;
    let mut voxels = vec![placeholder; window];
    for (&j, v) in needed.iter().zip(encoded) {
        voxels[j] = v;
    }
    let poses: Vec<_> = frames.iter().map(|f| f.pose).collect();
    let reconstructed = reconstruct_dropped(tape, &voxels, drop, &poses, &tcfg, params).map_err(at("temporal"))?;

    let jitter = if opts.jitter { Some(&mut *rng) } else { None };
    let out = render_loss(
        tape,
        reconstructed,
        &masks[drop].supervision,
        &clip.cameras,
        &cfg.renderer_config(),
        params,
        jitter,
        opts.normals.clone(),
    )
    .map_err(at("renderer"))?;
    let loss = tape.value(out.loss).item();
    if !loss.is_finite() {
        return Err(PipelineError::NonFinite { stage: "renderer" });
    }
    Ok(Forward {
        loss: out.loss,
        diagnostics: Diagnostics {
            loss,
            rgb_term: out.rgb_term,
            depth_term: out.depth_term,
            mean_weight_sum: out.mean_weight_sum,
            depth_mae: out.depth_mae,
            masked_fraction,
            drop,
            rays: out.rays,
        },
        reconstructed,
        masks,
        normals: out.normals,
    })
}

/// Loss diagnostics and parameter gradients of one clip.
pub fn loss_and_gradients<R: Rng + ?Sized>(
    clip: &MultiViewClip,
    cfg: &Config,
    params: &ParamSet,
    rng: &mut R,
    opts: &ForwardOptions,
) -> Result<(Diagnostics, ParamSet), PipelineError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true).map_err(at("bind"))?;
    let fwd = forward_pipeline(&mut tape, clip, cfg, &bound, rng, opts)?;
    let grads = tape.backward(fwd.loss).map_err(at("backward"))?;
    let grads = params.gradients(&bound, &tape, &grads);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(PipelineError::Stage { stage: "backward", detail: format!("non-finite gradient for {name}") });
    }
    Ok((fwd.diagnostics, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub diagnostics: Diagnostics,
    /// Mean squared difference between the reconstructed grid and the grid
    /// encoded from the dropped frame's unmasked images.
    pub reconstruction_error: f64,
}

/// Deterministic no-gradient evaluation: fixed masks and drop index drawn
/// from `seed`, no sample jitter.
pub fn evaluate(clip: &MultiViewClip, cfg: &Config, params: &ParamSet, seed: u64) -> Result<Evaluation, PipelineError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false).map_err(at("bind"))?;
    let mut rng = rng::stream(seed, &[EVAL_TAG]);
    let fwd = forward_pipeline(&mut tape, clip, cfg, &bound, &mut rng, &ForwardOptions::default())?;
    let drop = fwd.diagnostics.drop;
    let frame = &clip.frames[clip.window() - cfg.scene.window + drop];
    let visible: Vec<PixelMask> = frame.images.iter().map(|im| PixelMask::visible(im.width, im.height)).collect();
    let ecfg = cfg.encoder_config();
    let lift = LiftIndex::new(&clip.cameras, &ecfg);
    let target = encode_frames(&mut tape, std::slice::from_ref(&frame.images), &[visible], &lift, &ecfg, &bound).map_err(at("encoder"))?[0];
    let diff = tape.sub(fwd.reconstructed, target).map_err(at("evaluate"))?;
    let d = tape.value(diff);
    Ok(Evaluation { diagnostics: fwd.diagnostics, reconstruction_error: d.squared_norm() / d.len() as f64 })
}

/// Diff-error view of a pipeline error, for closures that must return one.
pub fn as_diff_error(e: PipelineError) -> DiffError {
    DiffError::Invalid { op: "pipeline", detail: e.to_string() }
}
