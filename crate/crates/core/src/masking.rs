//! Spatial masking: depth-aware supervision pixels, two-stage patch masks and
//! mask bookkeeping for the mask-respecting backbone.

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::container::{Blob, BlobError};
use crate::scenegen::{Frame, Image};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("fill ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("patch size must be positive")]
    ZeroPatch,
    #[error("view {view}: no depth samples below {tau} m")]
    NoCandidates { view: usize, tau: f64 },
    #[error("view {0} not present in frame")]
    NoSuchView(usize),
    #[error("mask is {mask_w}x{mask_h}, image is {image_w}x{image_h}")]
    ShapeMismatch { mask_w: usize, mask_h: usize, image_w: usize, image_h: usize },
    #[error(transparent)]
    Blob(#[from] BlobError),
}

/// Boolean grid, `true` = masked (invisible to the encoder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn visible(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn masked(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn is_masked(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn masked_fraction(&self) -> f64 {
        self.data.iter().filter(|&&m| m).count() as f64 / self.data.len().max(1) as f64
    }

    /// 1 for visible, 0 for masked, row-major.
    pub fn visibility(&self) -> Vec<f64> {
        self.data.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()
    }

    fn fill_rect(&mut self, row0: usize, row1: usize, col0: usize, col1: usize) {
        for r in row0..row1.min(self.height) {
            for c in col0..col1.min(self.width) {
                self.data[r * self.width + c] = true;
            }
        }
    }

    fn any_in_rect(&self, row0: usize, row1: usize, col0: usize, col1: usize) -> bool {
        (row0..row1.min(self.height)).any(|r| (col0..col1.min(self.width)).any(|c| self.data[r * self.width + c]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionPixel {
    pub col: u32,
    pub row: u32,
    pub color: [f64; 3],
    /// Ray distance to the first hit.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionSet {
    pub view: usize,
    pub pixels: Vec<SupervisionPixel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub s_ray: usize,
    pub s_fill: usize,
    pub rho: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { s_ray: 4, s_fill: 8, rho: 0.3 }
    }
}

/// Bookkeeping of the stage-2 fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FillStats {
    pub cells: usize,
    pub eligible: usize,
    pub masked: usize,
}

/// Up to `m` sparse-depth pixels of `view` with depth below `tau`, drawn
/// uniformly without replacement and returned in draw order.
pub fn select_supervision_pixels<R: Rng + ?Sized>(
    frame: &Frame,
    view: usize,
    tau: f64,
    m: usize,
    rng: &mut R,
) -> Result<SupervisionSet, MaskError> {
    let depths = frame.depths.get(view).ok_or(MaskError::NoSuchView(view))?;
    let image = &frame.images[view];
    let candidates: Vec<_> = depths.iter().filter(|d| d.depth < tau).collect();
    if candidates.is_empty() {
        return Err(MaskError::NoCandidates { view, tau });
    }
    if candidates.len() < m {
        log::warn!("view {view}: only {} of {m} supervision pixels available", candidates.len());
    }
    let take = m.min(candidates.len());
    let pixels = sample(rng, candidates.len(), take)
        .into_iter()
        .map(|i| {
            let d = candidates[i];
            SupervisionPixel { col: d.col, row: d.row, color: image.pixel(d.col as usize, d.row as usize), depth: d.depth }
        })
        .collect();
    Ok(SupervisionSet { view, pixels })
}

/// Stage 1 masks an `s_ray` patch around each supervision pixel; stage 2
/// masks `round(rho·eligible)` of the `s_fill` cells untouched by stage 1.
pub fn build_mask<R: Rng + ?Sized>(
    supervision: &SupervisionSet,
    width: usize,
    height: usize,
    params: &MaskParams,
    rng: &mut R,
) -> Result<(PixelMask, FillStats), MaskError> {
    if !(0.0..=1.0).contains(&params.rho) {
        return Err(MaskError::BadRatio(params.rho));
    }
    if params.s_ray == 0 || params.s_fill == 0 {
        return Err(MaskError::ZeroPatch);
    }
    let mut mask = PixelMask::visible(width, height);
    let half = params.s_ray / 2;
    for p in &supervision.pixels {
        let (r0, c0) = ((p.row as usize).saturating_sub(half), (p.col as usize).saturating_sub(half));
        let (r1, c1) = (p.row as usize + params.s_ray - half, p.col as usize + params.s_ray - half);
        mask.fill_rect(r0, r1, c0, c1);
    }

    let s = params.s_fill;
    let (rows, cols) = (height.div_ceil(s), width.div_ceil(s));
    let eligible: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| !mask.any_in_rect(r * s, (r + 1) * s, c * s, (c + 1) * s))
        .collect();
    let count = (params.rho * eligible.len() as f64).round() as usize;
    for i in sample(rng, eligible.len(), count) {
        let (r, c) = eligible[i];
        mask.fill_rect(r * s, (r + 1) * s, c * s, (c + 1) * s);
    }
    Ok((mask, FillStats { cells: rows * cols, eligible: eligible.len(), masked: count }))
}

/// Masked pixels set to zero.
pub fn apply_mask(image: &Image, mask: &PixelMask) -> Result<Image, MaskError> {
    if image.width != mask.width || image.height != mask.height {
        return Err(MaskError::ShapeMismatch {
            mask_w: mask.width,
            mask_h: mask.height,
            image_w: image.width,
            image_h: image.height,
        });
    }
    let mut out = image.clone();
    for (px, &m) in out.data.chunks_mut(3).zip(&mask.data) {
        if m {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// A coarse cell is visible iff any pixel it covers is visible; partial
/// border cells cover what remains.
pub fn downsample_mask(mask: &PixelMask, stride: usize) -> PixelMask {
    let stride = stride.max(1);
    let (w, h) = (mask.width.div_ceil(stride), mask.height.div_ceil(stride));
    let mut out = PixelMask::masked(w, h);
    for r in 0..h {
        for c in 0..w {
            let visible = (r * stride..((r + 1) * stride).min(mask.height))
                .any(|y| (c * stride..((c + 1) * stride).min(mask.width)).any(|x| !mask.data[y * mask.width + x]));
            out.data[r * w + c] = !visible;
        }
    }
    out
}

/// Masks and supervision for every view of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMasks {
    pub masks: Vec<PixelMask>,
    pub supervision: Vec<SupervisionSet>,
    pub fill: Vec<FillStats>,
}

pub fn mask_frame<R: Rng + ?Sized>(
    frame: &Frame,
    tau: f64,
    m: usize,
    params: &MaskParams,
    rng: &mut R,
) -> Result<FrameMasks, MaskError> {
    let mut out = FrameMasks { masks: Vec::new(), supervision: Vec::new(), fill: Vec::new() };
    for (view, image) in frame.images.iter().enumerate() {
        let sup = select_supervision_pixels(frame, view, tau, m, rng)?;
        let (mask, fill) = build_mask(&sup, image.width, image.height, params, rng)?;
        out.masks.push(mask);
        out.supervision.push(sup);
        out.fill.push(fill);
    }
    Ok(out)
}

impl FrameMasks {
    /// Stores masks as `mask.{v}` (u8 `[H,W]`) and supervision as
    /// `supervision.{v}.pixels` / `.colors` / `.depths`.
    pub fn store(&self, blob: &mut Blob) {
        for (v, m) in self.masks.iter().enumerate() {
            blob.put_u8(format!("mask.{v}"), &[m.height, m.width], m.data.iter().map(|&b| b as u8).collect());
        }
        for (v, s) in self.supervision.iter().enumerate() {
            let n = s.pixels.len();
            blob.put_u32(format!("supervision.{v}.pixels"), &[n, 2], s.pixels.iter().flat_map(|p| [p.col, p.row]).collect());
            blob.put_f64(format!("supervision.{v}.colors"), &[n, 3], s.pixels.iter().flat_map(|p| p.color).collect());
            blob.put_f64(format!("supervision.{v}.depths"), &[n], s.pixels.iter().map(|p| p.depth).collect());
        }
    }

    /// Inverse of [`FrameMasks::store`]; fill statistics are not persisted.
    pub fn restore(blob: &Blob, views: usize) -> Result<Self, MaskError> {
        let mut out = FrameMasks { masks: Vec::new(), supervision: Vec::new(), fill: Vec::new() };
        for v in 0..views {
            let (shape, data) = blob.u8s(&format!("mask.{v}"))?;
            if shape.len() != 2 {
                return Err(BlobError::WrongShape { name: format!("mask.{v}"), found: shape.to_vec(), expected: vec![0, 0] }.into());
            }
            out.masks.push(PixelMask { height: shape[0], width: shape[1], data: data.iter().map(|&b| b != 0).collect() });
            let (shape, px) = blob.u32s(&format!("supervision.{v}.pixels"))?;
            let n = shape.first().copied().unwrap_or(0);
            let colors = blob.f64s_shaped(&format!("supervision.{v}.colors"), &[n, 3])?;
            let depths = blob.f64s_shaped(&format!("supervision.{v}.depths"), &[n])?;
            let pixels = (0..n)
                .map(|i| SupervisionPixel {
                    col: px[2 * i],
                    row: px[2 * i + 1],
                    color: [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]],
                    depth: depths[i],
                })
                .collect();
            out.supervision.push(SupervisionSet { view: v, pixels });
        }
        Ok(out)
    }
}
