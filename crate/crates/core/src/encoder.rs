//! Voxel encoder: a mask-respecting convolutional backbone followed by a
//! lift-splat view transform into one ego-frame voxel grid per timestamp.
//!
//! Voxel tensors are `[C, Z, H, W]` with `H` along ego y and `W` along ego x.

use rand::Rng;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::geometry::{Camera, GridExtent};
use crate::masking::{downsample_mask, PixelMask};
use crate::params::{init_uniform, Bound, ParamSet};
use crate::scenegen::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of the four backbone stages.
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    /// Voxel feature channels `C`.
    pub channels: usize,
    pub depth_bins: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    pub extent: GridExtent,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 16, 16],
            stage_strides: [2, 2, 1, 1],
            channels: 16,
            depth_bins: 16,
            depth_near: 0.5,
            depth_far: 12.0,
            extent: GridExtent { min: [-8.0, -8.0, -1.0], max: [8.0, 8.0, 3.0], dims: [32, 32, 4] },
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    fn feature_channels(&self) -> usize {
        self.stage_channels[3]
    }

    /// Shape `[C, Z, H, W]` of one voxel grid.
    pub fn voxel_shape(&self) -> [usize; 4] {
        let d = self.extent.dims;
        [self.channels, d[2], d[1], d[0]]
    }

    /// Camera-z of every depth bin, uniform over `[near, far]`.
    pub fn bin_depths(&self) -> Vec<f64> {
        let n = self.depth_bins;
        (0..n).map(|i| self.depth_near + (self.depth_far - self.depth_near) * i as f64 / (n - 1) as f64).collect()
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    let mut c_in = 3;
    for (i, &c_out) in cfg.stage_channels.iter().enumerate() {
        p.insert(format!("encoder.conv{i}.weight"), init_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9, 2f64.sqrt()));
        p.insert(format!("encoder.conv{i}.bias"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
    let f = cfg.feature_channels();
    p.insert("encoder.mask_token", init_uniform(rng, &[f], 1, 0.1));
    p.insert("encoder.depth.weight", init_uniform(rng, &[cfg.depth_bins, f, 1, 1], f, 1.0));
    p.insert("encoder.depth.bias", Tensor::zeros(&[cfg.depth_bins]));
    p.insert("encoder.context.weight", init_uniform(rng, &[cfg.channels, f, 1, 1], f, 1.0));
    p.insert("encoder.context.bias", Tensor::zeros(&[cfg.channels]));
    p
}

/// `[3, H, W]` planes of an interleaved RGB image.
pub fn image_chw(image: &Image) -> Vec<f64> {
    let n = image.width * image.height;
    let mut out = vec![0.0; 3 * n];
    for (i, px) in image.data.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c];
        }
    }
    out
}

/// Visibility planes `[B, 1, h, w]` of masks downsampled by `stride`.
fn visibility(masks: &[PixelMask], stride: usize) -> Result<Tensor, DiffError> {
    let down: Vec<PixelMask> = masks.iter().map(|m| downsample_mask(m, stride)).collect();
    let (h, w) = (down[0].height, down[0].width);
    Tensor::new(vec![down.len(), 1, h, w], down.iter().flat_map(|m| m.visibility()).collect())
}

/// Output of [`masked_backbone`].
pub struct BackboneOutput {
    /// `[B, C_img, h, w]`, zero on masked cells.
    pub features: Var,
    /// `[B, 1, h, w]`, 1 where visible.
    pub visibility: Tensor,
}

/// Convolution stack over `images` (`[B, 3, H, W]`, already masked) whose
/// outputs on masked cells are zeroed after every stage.
pub fn masked_backbone(
    tape: &mut Tape,
    images: Var,
    masks: &[PixelMask],
    cfg: &EncoderConfig,
    params: &Bound,
) -> Result<BackboneOutput, DiffError> {
    if masks.is_empty() {
        return Err(DiffError::Invalid { op: "masked_backbone", detail: "no masks".into() });
    }
    let vis0 = tape.constant(visibility(masks, 1)?)?;
    let mut x = tape.mul(images, vis0)?;
    let mut stride = 1;
    let mut vis = tape.value(vis0).clone();
    for (i, &s) in cfg.stage_strides.iter().enumerate() {
        let w = params.get(&format!("encoder.conv{i}.weight"))?;
        let b = params.get(&format!("encoder.conv{i}.bias"))?;
        x = tape.conv2d(x, w, Some(b), s, 1)?;
        x = tape.relu(x)?;
        stride *= s;
        vis = visibility(masks, stride)?;
        let shape = tape.value(x).shape().to_vec();
        if shape[2] != vis.shape()[2] || shape[3] != vis.shape()[3] {
            return Err(DiffError::ShapeMismatch {
                op: "masked_backbone",
                detail: format!("stage {i} output {shape:?} vs mask {:?}", vis.shape()),
            });
        }
        let m = tape.constant(vis.clone())?;
        x = tape.mul(x, m)?;
    }
    Ok(BackboneOutput { features: x, visibility: vis })
}

/// Masked cells replaced by the mask token (`[C_img]`).
pub fn densify(tape: &mut Tape, out: &BackboneOutput, token: Var) -> Result<Var, DiffError> {
    let c = tape.value(token).len();
    let token = tape.reshape(token, &[1, c, 1, 1])?;
    let hidden = tape.constant(out.visibility.map(|v| 1.0 - v))?;
    let filled = tape.mul(token, hidden)?;
    tape.add(out.features, filled)
}

/// Voxel cell hit by every (view, depth bin, feature pixel), in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftIndex {
    pub views: usize,
    pub bins: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub cells: Vec<Option<usize>>,
}

impl LiftIndex {
    /// Lifted points of a feature pixel sit at its center ray at each bin's
    /// camera z, mapped into the ego frame (cameras are ego-fixed, so one
    /// index serves every timestamp).
    pub fn new(cameras: &[Camera], cfg: &EncoderConfig) -> Self {
        let stride = cfg.total_stride();
        let (fh, fw) = (cameras[0].height.div_ceil(stride), cameras[0].width.div_ceil(stride));
        let depths = cfg.bin_depths();
        let mut cells = Vec::with_capacity(cameras.len() * depths.len() * fh * fw);
        for cam in cameras {
            let ego_from_cam = cam.cam_from_ego.inverse();
            let (sx, sy) = (cam.width as f64 / fw as f64, cam.height as f64 / fh as f64);
            for &z in &depths {
                for r in 0..fh {
                    for c in 0..fw {
                        let (u, v) = ((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
                        let p_cam = [(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z];
                        cells.push(cfg.extent.cell_of(ego_from_cam.apply(p_cam)));
                    }
                }
            }
        }
        Self { views: cameras.len(), bins: depths.len(), feat_h: fh, feat_w: fw, cells }
    }
}

/// Softmax depth distribution times context feature, scatter-added into
/// the voxel grid. `features` is `[F·V, C_img, h, w]` for `F` timestamps;
/// returns one `[C, Z, H, W]` grid per timestamp.
pub fn lift_splat(
    tape: &mut Tape,
    features: Var,
    index: &LiftIndex,
    cfg: &EncoderConfig,
    params: &Bound,
) -> Result<Vec<Var>, DiffError> {
    let shape = tape.value(features).shape().to_vec();
    let (bv, hw) = (shape[0], shape[2] * shape[3]);
    if bv % index.views != 0 || shape[2] != index.feat_h || shape[3] != index.feat_w {
        return Err(DiffError::ShapeMismatch { op: "lift_splat", detail: format!("features {shape:?} vs lift index") });
    }
    let frames = bv / index.views;
    let (d, c) = (cfg.depth_bins, cfg.channels);

    let logits = tape.conv2d(features, params.get("encoder.depth.weight")?, Some(params.get("encoder.depth.bias")?), 1, 0)?;
    let depth = tape.softmax(logits, 1)?;
    let depth = tape.reshape(depth, &[1, bv, d, hw])?;
    let ctx = tape.conv2d(features, params.get("encoder.context.weight")?, Some(params.get("encoder.context.bias")?), 1, 0)?;
    let ctx = tape.reshape(ctx, &[bv, c, 1, hw])?;
    let ctx = tape.permute(ctx, &[1, 0, 2, 3])?;
    let lifted = tape.mul(ctx, depth)?;
    let lifted = tape.reshape(lifted, &[c, bv * d * hw])?;

    let cells_per_frame = cfg.extent.dims.iter().product::<usize>();
    let per_frame = index.cells.len();
    let mut full = Vec::with_capacity(frames * per_frame);
    for f in 0..frames {
        full.extend(index.cells.iter().map(|cell| cell.map(|k| f * cells_per_frame + k)));
    }
    let grid = tape.scatter_add(lifted, &full, frames * cells_per_frame)?;
    let [_, z, h, w] = cfg.voxel_shape();
    let grid = tape.reshape(grid, &[c, frames, z, h, w])?;
    (0..frames)
        .map(|f| {
            let s = tape.slice(grid, 1, f, f + 1)?;
            tape.reshape(s, &[c, z, h, w])
        })
        .collect()
}

/// Encodes `F` timestamps at once. `images[f][v]` are already masked by
/// `masks[f][v]`. Returns one voxel grid per timestamp.
pub fn encode_frames(
    tape: &mut Tape,
    images: &[Vec<Image>],
    masks: &[Vec<PixelMask>],
    index: &LiftIndex,
    cfg: &EncoderConfig,
    params: &Bound,
) -> Result<Vec<Var>, DiffError> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(DiffError::Invalid { op: "encode_frames", detail: "frames and masks misaligned".into() });
    }
    let (h, w) = (images[0][0].height, images[0][0].width);
    let data: Vec<f64> = images.iter().flatten().flat_map(image_chw).collect();
    let batch = images.iter().map(Vec::len).sum::<usize>();
    let input = tape.constant(Tensor::new(vec![batch, 3, h, w], data)?)?;
    let flat_masks: Vec<PixelMask> = masks.iter().flatten().cloned().collect();
    let out = masked_backbone(tape, input, &flat_masks, cfg, params)?;
    let dense = densify(tape, &out, params.get("encoder.mask_token")?)?;
    lift_splat(tape, dense, index, cfg, params)
}
