//! Voxel decoder: one frame's voxel grid is withheld and regressed from the
//! others through BEV deformable attention.
//!
//! Frames are indexed `0..window` oldest first. BEV grids fold height into
//! channels as `B[c·Z + z, y, x] = V[c, z, y, x]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::geometry::{warp_reference_points, EgoPose, GridExtent};
use crate::params::{init_uniform, Bound, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    None,
    WarpCat,
    Short,
    Long,
    Both,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::None, Strategy::WarpCat, Strategy::Short, Strategy::Long, Strategy::Both];

    fn uses_short(self) -> bool {
        matches!(self, Strategy::Short | Strategy::Both)
    }

    fn uses_long(self) -> bool {
        matches!(self, Strategy::Long | Strategy::Both)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::WarpCat => "warp-cat",
            Strategy::Short => "short",
            Strategy::Long => "long",
            Strategy::Both => "both",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL.into_iter().find(|k| k.to_string() == s).ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConfig {
    pub strategy: Strategy,
    pub window: usize,
    pub heads: usize,
    pub points: usize,
    /// Voxel channels `C`; BEV channels are `C·Z`.
    pub channels: usize,
    /// Short-branch query width; the long branch uses half of it.
    pub query_channels: usize,
    pub extent: GridExtent,
}

impl TemporalConfig {
    pub fn bev_channels(&self) -> usize {
        self.channels * self.extent.dims[2]
    }

    pub fn long_channels(&self) -> usize {
        (self.query_channels / 2).max(1)
    }

    fn cells(&self) -> usize {
        self.extent.dims[0] * self.extent.dims[1]
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TemporalError {
    #[error("drop index {drop} outside window of {window}")]
    DropOutOfRange { drop: usize, window: usize },
    #[error("strategy {strategy} needs at least {needed} frames, got {got}")]
    TooFewFrames { strategy: Strategy, needed: usize, got: usize },
    #[error("{0} channels do not fold into {1} height slices")]
    Indivisible(usize, usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `[C, Z, H, W]` → `[C·Z, H, W]`.
pub fn height_to_channel(tape: &mut Tape, v: Var) -> Result<Var, TemporalError> {
    let s = tape.value(v).shape().to_vec();
    if s.len() != 4 {
        return Err(DiffError::ShapeMismatch { op: "height_to_channel", detail: format!("{s:?}") }.into());
    }
    Ok(tape.reshape(v, &[s[0] * s[1], s[2], s[3]])?)
}

/// `[C·Z, H, W]` → `[C, Z, H, W]`.
pub fn channel_to_height(tape: &mut Tape, b: Var, z: usize) -> Result<Var, TemporalError> {
    let s = tape.value(b).shape().to_vec();
    if s.len() != 3 {
        return Err(DiffError::ShapeMismatch { op: "channel_to_height", detail: format!("{s:?}") }.into());
    }
    if z == 0 || !s[0].is_multiple_of(z) {
        return Err(TemporalError::Indivisible(s[0], z));
    }
    Ok(tape.reshape(b, &[s[0] / z, z, s[1], s[2]])?)
}

pub fn choose_drop_index<R: Rng + ?Sized>(window: usize, rng: &mut R) -> usize {
    if window <= 1 {
        0
    } else {
        rng.gen_range(0..window)
    }
}

/// Cell centers of frame `from` expressed as lattice `(x, y)` of frame `to`.
pub fn reference_points(extent: &GridExtent, from: &EgoPose, to: &EgoPose) -> Vec<[f64; 2]> {
    warp_reference_points(&extent.bev_centers(), from, to)
        .into_iter()
        .map(|p| {
            let l = extent.to_lattice([p[0], p[1], 0.0]);
            [l[0], l[1]]
        })
        .collect()
}

/// Parameter prefix, slot count and widths of one deformable attention.
#[derive(Debug, Clone, Copy)]
pub struct AttnSpec<'a> {
    pub prefix: &'a str,
    pub heads: usize,
    pub points: usize,
    pub slots: usize,
    pub query_channels: usize,
    pub source_channels: usize,
}

pub fn init_attention<R: Rng + ?Sized>(spec: &AttnSpec, rng: &mut R) -> ParamSet {
    let (p, cq, cs) = (spec.prefix, spec.query_channels, spec.source_channels);
    let samples = spec.heads * spec.slots * spec.points;
    let mut out = ParamSet::new();
    out.insert(format!("{p}.value.weight"), init_uniform(rng, &[cq, cs], cs, 1.0));
    out.insert(format!("{p}.value.bias"), Tensor::zeros(&[cq, 1]));
    out.insert(format!("{p}.offset.weight"), init_uniform(rng, &[samples * 2, cq], cq, 0.1));
    out.insert(format!("{p}.offset.bias"), Tensor::zeros(&[samples * 2, 1]));
    out.insert(format!("{p}.attn.weight"), init_uniform(rng, &[samples, cq], cq, 0.1));
    out.insert(format!("{p}.attn.bias"), Tensor::zeros(&[samples, 1]));
    out.insert(format!("{p}.out.weight"), init_uniform(rng, &[cq, cq], cq, 1.0));
    out.insert(format!("{p}.out.bias"), Tensor::zeros(&[cq, 1]));
    out
}

pub struct AttnOutput {
    /// `[C_q, H, W]`.
    pub output: Var,
    /// `[heads, used_slots·points, H·W]`, softmax-normalized along axis 1.
    pub weights: Var,
}

/// `W·x + b` for `x: [C_in, N]`.
fn linear(tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var, DiffError> {
    let y = tape.matmul(params.get(&format!("{prefix}.weight"))?, x)?;
    tape.add(y, params.get(&format!("{prefix}.bias"))?)
}

/// Deformable attention of a `[C_q, H, W]` query over BEV sources. `sources`
/// pairs each source `[C_s, H, W]` with its slot and the lattice reference
/// point of every query cell in that source.
pub fn deform_attn(
    tape: &mut Tape,
    query: Var,
    sources: &[(usize, Var, Vec<[f64; 2]>)],
    spec: &AttnSpec,
    params: &Bound,
) -> Result<AttnOutput, DiffError> {
    if sources.is_empty() {
        return Err(DiffError::Invalid { op: "deform_attn", detail: "empty source list".into() });
    }
    let qs = tape.value(query).shape().to_vec();
    let (cq, h, w) = (qs[0], qs[1], qs[2]);
    let hw = h * w;
    let (nh, k, smax, p) = (spec.heads, spec.points, spec.slots, spec.prefix);
    if cq % nh != 0 || sources.iter().any(|(s, _, r)| *s >= smax || r.len() != hw) {
        return Err(DiffError::Invalid { op: "deform_attn", detail: "bad heads, slots or reference points".into() });
    }
    let dh = cq / nh;
    let q = tape.reshape(query, &[cq, hw])?;

    let offsets = linear(tape, params, &format!("{p}.offset"), q)?;
    let offsets = tape.reshape(offsets, &[nh, smax, k, 2, hw])?;
    let logits = linear(tape, params, &format!("{p}.attn"), q)?;
    let logits = tape.reshape(logits, &[nh, smax, k, hw])?;
    let used: Vec<Var> = sources.iter().map(|(s, _, _)| tape.slice(logits, 1, *s, s + 1)).collect::<Result<_, _>>()?;
    let used = tape.concat(&used, 1)?;
    let used = tape.reshape(used, &[nh, sources.len() * k, hw])?;
    let weights = tape.softmax(used, 1)?;

    let mut values = Vec::with_capacity(sources.len());
    let mut bases = Vec::with_capacity(sources.len());
    for (_, src, refs) in sources {
        let cs = tape.value(*src).shape()[0];
        let flat = tape.reshape(*src, &[cs, hw])?;
        values.push(linear(tape, params, &format!("{p}.value"), flat)?);
        let base: Vec<f64> = (0..k).flat_map(|_| refs.iter().flat_map(|r| [r[0], r[1]])).collect();
        bases.push(tape.constant(Tensor::new(vec![k * hw, 2], base)?)?);
    }

    let mut heads = Vec::with_capacity(nh);
    for head in 0..nh {
        let off_h = tape.slice(offsets, 0, head, head + 1)?;
        let w_h = tape.slice(weights, 0, head, head + 1)?;
        let mut acc: Option<Var> = None;
        for (i, (slot, _, _)) in sources.iter().enumerate() {
            let value = tape.slice(values[i], 0, head * dh, (head + 1) * dh)?;
            let value = tape.reshape(value, &[dh, h, w])?;

            let off = tape.slice(off_h, 1, *slot, slot + 1)?;
            let off = tape.reshape(off, &[k, 2, hw])?;
            let off = tape.permute(off, &[0, 2, 1])?;
            let off = tape.reshape(off, &[k * hw, 2])?;
            let coords = tape.add(bases[i], off)?;

            let sampled = tape.bilinear_sample_2d(value, coords)?;
            let sampled = tape.reshape(sampled, &[dh, k, hw])?;
            let wk = tape.slice(w_h, 1, i * k, (i + 1) * k)?;
            let weighted = tape.mul(sampled, wk)?;
            let summed = tape.reduce_sum(weighted, 1)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, summed)?,
                None => summed,
            });
        }
        heads.push(acc.expect("non-empty sources"));
    }
    let joined = tape.concat(&heads, 0)?;
    let out = linear(tape, params, &format!("{p}.out"), joined)?;
    let output = tape.reshape(out, &[cq, h, w])?;
    Ok(AttnOutput { output, weights })
}

fn short_spec(cfg: &TemporalConfig) -> AttnSpec<'static> {
    AttnSpec {
        prefix: "temporal.short",
        heads: cfg.heads,
        points: cfg.points,
        slots: 2,
        query_channels: cfg.query_channels,
        source_channels: cfg.bev_channels(),
    }
}

fn long_spec(cfg: &TemporalConfig) -> AttnSpec<'static> {
    AttnSpec {
        prefix: "temporal.long",
        heads: cfg.heads,
        points: cfg.points,
        slots: cfg.window.saturating_sub(1).max(1),
        query_channels: cfg.long_channels(),
        source_channels: cfg.bev_channels(),
    }
}

fn fusion_inputs(cfg: &TemporalConfig) -> usize {
    match cfg.strategy {
        Strategy::Both => cfg.query_channels + cfg.long_channels(),
        Strategy::Short => cfg.query_channels,
        Strategy::Long => cfg.long_channels(),
        Strategy::WarpCat => cfg.bev_channels() * cfg.window.saturating_sub(1),
        Strategy::None => 0,
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &TemporalConfig, rng: &mut R) -> ParamSet {
    let mut out = ParamSet::new();
    let (h, w) = (cfg.extent.dims[1], cfg.extent.dims[0]);
    if cfg.strategy.uses_short() {
        out.insert("temporal.short.query", init_uniform(rng, &[cfg.query_channels, h, w], 1, 0.5));
        out.extend(init_attention(&short_spec(cfg), rng));
    }
    if cfg.strategy.uses_long() {
        out.insert("temporal.long.query", init_uniform(rng, &[cfg.long_channels(), h, w], 1, 0.5));
        out.extend(init_attention(&long_spec(cfg), rng));
    }
    if cfg.strategy != Strategy::None {
        let (inp, c) = (fusion_inputs(cfg), cfg.bev_channels());
        out.insert("temporal.fuse.hidden.weight", init_uniform(rng, &[c, inp], inp, 2f64.sqrt()));
        out.insert("temporal.fuse.hidden.bias", Tensor::zeros(&[c, 1]));
        out.insert("temporal.fuse.out.weight", init_uniform(rng, &[c, c], c, 1.0));
        out.insert("temporal.fuse.out.bias", Tensor::zeros(&[c, 1]));
    }
    out
}

/// Regresses the dropped frame's `[C, Z, H, W]` grid. `voxels` holds every
/// frame of the window; entry `drop` is read only by [`Strategy::None`].
pub fn reconstruct_dropped(
    tape: &mut Tape,
    voxels: &[Var],
    drop: usize,
    poses: &[EgoPose],
    cfg: &TemporalConfig,
    params: &Bound,
) -> Result<Var, TemporalError> {
    let n = voxels.len();
    if drop >= n || poses.len() != n {
        return Err(TemporalError::DropOutOfRange { drop, window: n });
    }
    if cfg.strategy == Strategy::None {
        return Ok(voxels[drop]);
    }
    if n < 2 {
        return Err(TemporalError::TooFewFrames { strategy: cfg.strategy, needed: 2, got: n });
    }
    if cfg.strategy == Strategy::WarpCat && n != cfg.window {
        return Err(TemporalError::TooFewFrames { strategy: cfg.strategy, needed: cfg.window, got: n });
    }
    let z = cfg.extent.dims[2];
    let (h, w) = (cfg.extent.dims[1], cfg.extent.dims[0]);
    let hw = cfg.cells();
    let bev: Vec<Option<Var>> =
        (0..n).map(|j| if j == drop { Ok(None) } else { height_to_channel(tape, voxels[j]).map(Some) }).collect::<Result<_, _>>()?;
    let refs = |j: usize| reference_points(&cfg.extent, &poses[drop], &poses[j]);

    let mut branches = Vec::new();
    if cfg.strategy.uses_short() {
        let mut sources = Vec::new();
        for (slot, j) in [(0usize, drop.checked_sub(1)), (1, Some(drop + 1).filter(|&j| j < n))] {
            if let Some(j) = j {
                sources.push((slot, bev[j].expect("neighbor is not the dropped frame"), refs(j)));
            }
        }
        let q = params.get("temporal.short.query")?;
        let out = deform_attn(tape, q, &sources, &short_spec(cfg), params)?;
        branches.push(tape.reshape(out.output, &[cfg.query_channels, hw])?);
    }
    if cfg.strategy.uses_long() {
        let spec = long_spec(cfg);
        let sources: Vec<_> = (0..n)
            .filter(|&j| j != drop)
            .enumerate()
            .map(|(slot, j)| (slot, bev[j].expect("dropped frame filtered"), refs(j)))
            .collect();
        if sources.len() > spec.slots {
            return Err(TemporalError::TooFewFrames { strategy: cfg.strategy, needed: spec.slots + 1, got: n });
        }
        let q = params.get("temporal.long.query")?;
        let out = deform_attn(tape, q, &sources, &spec, params)?;
        branches.push(tape.reshape(out.output, &[cfg.long_channels(), hw])?);
    }
    if cfg.strategy == Strategy::WarpCat {
        for j in (0..n).filter(|&j| j != drop) {
            let pts: Vec<f64> = refs(j).iter().flat_map(|r| [r[0], r[1]]).collect();
            let coords = tape.constant(Tensor::new(vec![hw, 2], pts)?)?;
            branches.push(tape.bilinear_sample_2d(bev[j].expect("dropped frame skipped"), coords)?);
        }
    }

    let x = if branches.len() == 1 { branches[0] } else { tape.concat(&branches, 0)? };
    let hidden = linear(tape, params, "temporal.fuse.hidden", x)?;
    let hidden = tape.relu(hidden)?;
    let fused = linear(tape, params, "temporal.fuse.out", hidden)?;
    let fused = tape.reshape(fused, &[cfg.bev_channels(), h, w])?;
    channel_to_height(tape, fused, z)
}
