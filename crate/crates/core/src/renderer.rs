//! Differentiable SDF volume rendering from a voxel grid.
//!
//! Samples along each ray read a trilinear voxel feature; an SDF head maps it
//! to a signed distance and geometry feature, a color head to RGB. Opacity
//! follows the NeuS discretization with a learned sharpness `a = exp(â)` and
//! a virtual terminal SDF of 0; transmittance is the exclusive product of
//! `1 − α`. Normals are finite differences of the SDF field and carry no
//! gradient.
//!
//! Tensor layouts: per-ray quantities are `[R, K]`; colors are `[3, R, K]`;
//! head inputs stack features along rows with one column per sample.

use rand::Rng;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::geometry::{generate_ray, sample_along_ray, Camera, EgoPose, GeometryError, GridExtent, Ray, Vec3};
use crate::masking::{SupervisionPixel, SupervisionSet};
use crate::params::{init_uniform, Bound, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct RendererConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub lambda_rgb: f64,
    pub lambda_depth: f64,
    pub hidden: usize,
    pub geo_features: usize,
    /// Initial `â`; the sharpness is `exp(â)`.
    pub log_sharpness_init: f64,
    /// Initial SDF output bias (positive: start in empty space).
    pub sdf_bias_init: f64,
    /// Voxel feature channels.
    pub channels: usize,
    pub extent: GridExtent,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            near: 0.5,
            far: 12.0,
            lambda_rgb: 10.0,
            lambda_depth: 10.0,
            hidden: 32,
            geo_features: 8,
            log_sharpness_init: 1.0,
            sdf_bias_init: 0.5,
            channels: 16,
            extent: GridExtent { min: [-8.0, -8.0, -1.0], max: [8.0, 8.0, 3.0], dims: [32, 32, 4] },
        }
    }
}

impl RendererConfig {
    /// Half the smallest cell edge.
    pub fn normal_eps(&self) -> f64 {
        let c = self.extent.cell_size();
        0.5 * c[0].min(c[1]).min(c[2])
    }

    fn rgb_inputs(&self) -> usize {
        self.channels + 9 + self.geo_features
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &RendererConfig, rng: &mut R) -> ParamSet {
    let (h, c) = (cfg.hidden, cfg.channels);
    let mut p = ParamSet::new();
    p.insert("renderer.sdf.hidden.weight", init_uniform(rng, &[h, c + 3], c + 3, 2f64.sqrt()));
    p.insert("renderer.sdf.hidden.bias", Tensor::zeros(&[h, 1]));
    p.insert("renderer.sdf.out.weight", init_uniform(rng, &[1 + cfg.geo_features, h], h, 0.5));
    let mut bias = Tensor::zeros(&[1 + cfg.geo_features, 1]);
    bias.data_mut()[0] = cfg.sdf_bias_init;
    p.insert("renderer.sdf.out.bias", bias);
    p.insert("renderer.rgb.hidden.weight", init_uniform(rng, &[h, cfg.rgb_inputs()], cfg.rgb_inputs(), 2f64.sqrt()));
    p.insert("renderer.rgb.hidden.bias", Tensor::zeros(&[h, 1]));
    p.insert("renderer.rgb.out.weight", init_uniform(rng, &[3, h], h, 0.5));
    p.insert("renderer.rgb.out.bias", Tensor::zeros(&[3, 1]));
    p.insert("renderer.log_sharpness", Tensor::new(vec![1], vec![cfg.log_sharpness_init]).expect("one element"));
    p
}

/// Positions mapped to `[-1, 1]` over the extent, as `[3, N]` rows.
fn normalized_positions(points: &[Vec3], extent: &GridExtent) -> Tensor {
    let n = points.len();
    let mut data = vec![0.0; 3 * n];
    for a in 0..3 {
        let (c, half) = ((extent.min[a] + extent.max[a]) / 2.0, (extent.max[a] - extent.min[a]) / 2.0);
        for (i, p) in points.iter().enumerate() {
            data[a * n + i] = (p[a] - c) / half;
        }
    }
    Tensor::new(vec![3, n], data).expect("sized above")
}

/// Trilinear voxel feature at each point, `[C, N]`. Points inside the extent
/// but beyond the outermost cell centers read the border cells; points outside
/// the extent read zero.
pub fn interpolate_feature(tape: &mut Tape, voxel: Var, points: &[Vec3], extent: &GridExtent) -> Result<Var, DiffError> {
    let dims = extent.dims;
    let coords: Vec<f64> = points
        .iter()
        .flat_map(|&p| {
            if extent.contains(p) {
                let l = extent.to_lattice(p);
                [0, 1, 2].map(|a| l[a].clamp(0.0, (dims[a] - 1) as f64))
            } else {
                [-10.0; 3]
            }
        })
        .collect();
    let coords = tape.constant(Tensor::new(vec![points.len(), 3], coords)?)?;
    tape.trilinear_sample_3d(voxel, coords)
}

fn linear(tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var, DiffError> {
    let y = tape.matmul(params.get(&format!("{prefix}.weight"))?, x)?;
    tape.add(y, params.get(&format!("{prefix}.bias"))?)
}

/// `Φ_SDF([f; p])` → `(s: [1, N], g: [G, N])`.
pub fn sdf_head(tape: &mut Tape, features: Var, positions: Var, params: &Bound) -> Result<(Var, Var), DiffError> {
    let x = tape.concat(&[features, positions], 0)?;
    let h = linear(tape, params, "renderer.sdf.hidden", x)?;
    let h = tape.relu(h)?;
    let out = linear(tape, params, "renderer.sdf.out", h)?;
    let rows = tape.value(out).shape()[0];
    Ok((tape.slice(out, 0, 0, 1)?, tape.slice(out, 0, 1, rows)?))
}

/// `Φ_RGB([f; p; d; n; g])` → `[3, N]` in `[0, 1]`.
pub fn rgb_head(
    tape: &mut Tape,
    features: Var,
    positions: Var,
    directions: Var,
    normals: Var,
    geo: Var,
    params: &Bound,
) -> Result<Var, DiffError> {
    let x = tape.concat(&[features, positions, directions, normals, geo], 0)?;
    let h = linear(tape, params, "renderer.rgb.hidden", x)?;
    let h = tape.relu(h)?;
    let out = linear(tape, params, "renderer.rgb.out", h)?;
    tape.sigmoid(out)
}

/// The composed field `s(p) = Φ_SDF(interp(V, p), p)` without gradients.
pub fn sdf_field(voxel: &Tensor, params: &ParamSet, points: &[Vec3], extent: &GridExtent) -> Result<Vec<f64>, DiffError> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false)?;
    let v = tape.constant(voxel.clone())?;
    let f = interpolate_feature(&mut tape, v, points, extent)?;
    let p = tape.constant(normalized_positions(points, extent))?;
    let (s, _) = sdf_head(&mut tape, f, p, &b)?;
    Ok(tape.value(s).data().to_vec())
}

/// Unit central-difference gradients of `field`, `[3, N]`; zero where the
/// gradient norm is below `1e-8`.
pub fn finite_difference_normals(field: impl Fn(&[Vec3]) -> Result<Vec<f64>, DiffError>, points: &[Vec3], eps: f64) -> Result<Tensor, DiffError> {
    let n = points.len();
    let mut probes = Vec::with_capacity(6 * n);
    for a in 0..3 {
        for sign in [1.0, -1.0] {
            probes.extend(points.iter().map(|p| {
                let mut q = *p;
                q[a] += sign * eps;
                q
            }));
        }
    }
    let s = field(&probes)?;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let g: [f64; 3] = [0, 1, 2].map(|a| (s[2 * a * n + i] - s[(2 * a + 1) * n + i]) / (2.0 * eps));
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm >= 1e-8 {
            for a in 0..3 {
                out[a * n + i] = g[a] / norm;
            }
        }
    }
    Tensor::new(vec![3, n], out)
}

/// NeuS opacity of `sdf: [R, K]` with a terminal SDF of 0 after sample `K`:
/// `α_j = max((σ_j − σ_{j+1}) / σ_j, 0)`, `σ = sigmoid(exp(â)·s)` clamped at
/// `1e-12`.
pub fn opacity(tape: &mut Tape, sdf: Var, log_sharpness: Var) -> Result<Var, DiffError> {
    let s = tape.value(sdf).shape().to_vec();
    let (r, k) = (s[0], s[1]);
    let zero = tape.constant(Tensor::zeros(&[r, 1]))?;
    let ext = tape.concat(&[sdf, zero], 1)?;
    let a = tape.exp(log_sharpness)?;
    let scaled = tape.mul(ext, a)?;
    let sig = tape.sigmoid(scaled)?;
    let sig = tape.clamp_min(sig, 1e-12)?;
    let cur = tape.slice(sig, 1, 0, k)?;
    let next = tape.slice(sig, 1, 1, k + 1)?;
    let ratio = tape.div(next, cur)?;
    let one_minus = tape.scale(ratio, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    tape.relu(one_minus)
}

pub struct Composite {
    /// `[3, R]`.
    pub rgb: Var,
    /// `[R]`, in the units of the sample depths.
    pub depth: Var,
    /// `T_j·α_j`, `[R, K]`.
    pub weights: Var,
    /// `T_j`, `[R, K]`.
    pub transmittance: Var,
}

/// `Ĉ = Σ T_j α_j c_j`, `D̂ = Σ T_j α_j t_j` with `T_j = ∏_{k<j} (1 − α_k)`.
pub fn accumulate(tape: &mut Tape, alpha: Var, colors: Var, depths: Var) -> Result<Composite, DiffError> {
    let keep = tape.scale(alpha, -1.0)?;
    let keep = tape.add_scalar(keep, 1.0)?;
    let transmittance = tape.exclusive_cumprod(keep)?;
    let weights = tape.mul(transmittance, alpha)?;
    let wt = tape.mul(weights, depths)?;
    let depth = tape.reduce_sum(wt, 1)?;
    let wc = tape.mul(colors, weights)?;
    let rgb = tape.reduce_sum(wc, 2)?;
    Ok(Composite { rgb, depth, weights, transmittance })
}

/// Rays with their sample depths `[R, K]` and flattened points.
pub struct RaySet {
    pub rays: Vec<Ray>,
    pub depths: Tensor,
    pub points: Vec<Vec3>,
}

pub fn sample_rays<R: Rng + ?Sized>(rays: Vec<Ray>, cfg: &RendererConfig, mut jitter: Option<&mut R>) -> Result<RaySet, GeometryError> {
    let mut depths = Vec::with_capacity(rays.len() * cfg.samples);
    let mut points = Vec::with_capacity(rays.len() * cfg.samples);
    for ray in &rays {
        let s = sample_along_ray(ray, cfg.near, cfg.far, cfg.samples, jitter.as_deref_mut())?;
        depths.extend(s.depths);
        points.extend(s.points);
    }
    let depths = Tensor::new(vec![rays.len(), cfg.samples], depths).expect("one depth per sample");
    Ok(RaySet { rays, depths, points })
}

/// Renders `set` through `voxel`. `normals` replaces the finite-difference
/// normals when given (`[3, R·K]`).
pub fn render_rays(
    tape: &mut Tape,
    voxel: Var,
    set: &RaySet,
    cfg: &RendererConfig,
    bound: &Bound,
    normals: Option<Tensor>,
) -> Result<Composite, DiffError> {
    let (r, k) = (set.rays.len(), cfg.samples);
    let n = r * k;
    let feats = interpolate_feature(tape, voxel, &set.points, &cfg.extent)?;
    let pos = tape.constant(normalized_positions(&set.points, &cfg.extent))?;
    let (s, g) = sdf_head(tape, feats, pos, bound)?;
    let normals = match normals {
        Some(t) => t,
        None => field_normals(tape, voxel, set, cfg, bound)?,
    };
    let normals = tape.constant(normals)?;
    let dirs: Vec<f64> = (0..3).flat_map(|a| set.rays.iter().flat_map(move |ray| std::iter::repeat_n(ray.direction[a], k))).collect();
    let dirs = tape.constant(Tensor::new(vec![3, n], dirs)?)?;
    let colors = rgb_head(tape, feats, pos, dirs, normals, g, bound)?;
    let colors = tape.reshape(colors, &[3, r, k])?;
    let s = tape.reshape(s, &[r, k])?;
    let alpha = opacity(tape, s, bound.get("renderer.log_sharpness")?)?;
    let depths = tape.constant(set.depths.clone())?;
    accumulate(tape, alpha, colors, depths)
}

/// Finite-difference normals of the current field at every sample of `set`.
fn field_normals(tape: &Tape, voxel: Var, set: &RaySet, cfg: &RendererConfig, bound: &Bound) -> Result<Tensor, DiffError> {
    let grid = tape.value(voxel).clone();
    let current = current_values(tape, bound);
    finite_difference_normals(|pts| sdf_field(&grid, &current, pts, &cfg.extent), &set.points, cfg.normal_eps())
}

/// Renderer parameter values as currently held on the tape.
fn current_values(tape: &Tape, bound: &Bound) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, v) in bound.iter().filter(|(n, _)| n.starts_with("renderer.")) {
        out.insert(name.clone(), tape.value(*v).clone());
    }
    out
}

pub struct RenderLoss {
    pub loss: Var,
    pub rgb_term: f64,
    pub depth_term: f64,
    /// Mean `Σ_j T_j α_j` per ray.
    pub mean_weight_sum: f64,
    /// Mean `|D̂ − D|` in meters.
    pub depth_mae: f64,
    pub rays: usize,
    /// Normals the colors were conditioned on, `[3, M·K]`.
    pub normals: Tensor,
}

/// Supervision rays of every view, cast in the rendered frame's ego frame.
pub fn supervision_rays(supervision: &[SupervisionSet], cameras: &[Camera]) -> Result<Vec<Ray>, GeometryError> {
    let pose = EgoPose::identity();
    let mut rays = Vec::new();
    for set in supervision {
        for p in &set.pixels {
            rays.push(generate_ray(&cameras[set.view], (p.col as f64 + 0.5, p.row as f64 + 0.5), &pose)?);
        }
    }
    Ok(rays)
}

/// `(λ_rgb/M)·Σ‖Ĉ−C‖₁ + (λ_d/M)·Σ|D̂−D|` over all `M` supervision rays.
/// `normals` as in [`render_rays`].
#[allow(clippy::too_many_arguments)]
pub fn render_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    voxel: Var,
    supervision: &[SupervisionSet],
    cameras: &[Camera],
    cfg: &RendererConfig,
    bound: &Bound,
    jitter: Option<&mut R>,
    normals: Option<Tensor>,
) -> Result<RenderLoss, RenderError> {
    let rays = supervision_rays(supervision, cameras)?;
    let m = rays.len();
    if m == 0 {
        return Err(RenderError::NoRays);
    }
    let set = sample_rays(rays, cfg, jitter)?;
    let normals = match normals {
        Some(n) => n,
        None => field_normals(tape, voxel, &set, cfg, bound)?,
    };
    let out = render_rays(tape, voxel, &set, cfg, bound, Some(normals.clone()))?;

    let pixels: Vec<SupervisionPixel> = supervision.iter().flat_map(|s| s.pixels.iter().copied()).collect();
    let terms = supervision_loss(tape, out.rgb, out.depth, &pixels, cfg.lambda_rgb, cfg.lambda_depth)?;
    let ws = tape.value(out.weights);
    Ok(RenderLoss {
        loss: terms.loss,
        rgb_term: terms.rgb_term,
        depth_term: terms.depth_term,
        mean_weight_sum: ws.sum() / m as f64,
        depth_mae: terms.depth_mae,
        rays: m,
        normals,
    })
}

pub struct LossTerms {
    pub loss: Var,
    pub rgb_term: f64,
    pub depth_term: f64,
    pub depth_mae: f64,
}

/// Weighted mean L1 color and depth error of predictions `rgb: [3, M]` and
/// `depth: [M]` against `targets`.
pub fn supervision_loss(
    tape: &mut Tape,
    rgb: Var,
    depth: Var,
    targets: &[SupervisionPixel],
    lambda_rgb: f64,
    lambda_depth: f64,
) -> Result<LossTerms, DiffError> {
    let m = targets.len();
    if m == 0 {
        return Err(DiffError::Invalid { op: "supervision_loss", detail: "no targets".into() });
    }
    let target_rgb: Vec<f64> = (0..3).flat_map(|c| targets.iter().map(move |p| p.color[c])).collect();
    let target_depth: Vec<f64> = targets.iter().map(|p| p.depth).collect();
    let target_rgb = tape.constant(Tensor::new(vec![3, m], target_rgb)?)?;
    let target_depth = tape.constant(Tensor::new(vec![m], target_depth)?)?;

    let drgb = tape.sub(rgb, target_rgb)?;
    let drgb = tape.abs(drgb)?;
    let rgb_sum = tape.sum_all(drgb)?;
    let rgb_term = tape.scale(rgb_sum, lambda_rgb / m as f64)?;
    let dd = tape.sub(depth, target_depth)?;
    let dd = tape.abs(dd)?;
    let depth_sum = tape.sum_all(dd)?;
    let depth_term = tape.scale(depth_sum, lambda_depth / m as f64)?;
    let loss = tape.add(rgb_term, depth_term)?;
    Ok(LossTerms {
        loss,
        rgb_term: tape.value(rgb_term).item(),
        depth_term: tape.value(depth_term).item(),
        depth_mae: tape.value(depth_sum).item() / m as f64,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("no supervision rays")]
    NoRays,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
