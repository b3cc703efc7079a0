use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::pipeline::{as_diff_error, forward_pipeline, init_params, ForwardOptions};
use crate::diffcore::cases::{check_op, registered_ops};
use crate::diffcore::{gradcheck, GradcheckError, GradcheckOptions, Tape, Tensor, Var};
use crate::geometry::{EgoPose, GridExtent, Rigid};
use crate::params::Bound;
use crate::rng;
use crate::scenegen::{default_cameras, linear_trajectory, random_scene, render_clip, MultiViewClip, SceneParams};
use crate::temporal::{deform_attn, init_attention, reference_points, AttnSpec, Strategy};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Composition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub kind: CheckKind,
    /// `None` when every attempt landed on a kink or failed outright.
    pub max_rel_error: Option<f64>,
    pub tolerance: f64,
    pub note: String,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_some_and(|e| e < self.tolerance)
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let err = self.max_rel_error.map_or("-".to_string(), |e| format!("{e:.3e}"));
        let status = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{:<28} {:>10} {:>8.0e} {:<4} {}", self.name, err, self.tolerance, status, self.note)
    }
}

/// Config of the toy composed paths: one 16×12 view, a 4×4×2 grid and
/// two-channel features.
pub fn toy_config(strategy: Strategy, window: usize) -> Config {
    let mut c = Config::default();
    c.scene.views = 1;
    c.scene.width = 16;
    c.scene.height = 12;
    c.scene.window = window;
    c.scene.focal = 10.0;
    c.scene.lidar_samples = 60;
    c.scene.objects = 3;
    c.grid = GridExtent { min: [-8.0, -8.0, -1.0], max: [8.0, 8.0, 3.0], dims: [4, 4, 2] };
    c.masking.supervision = 4;
    c.masking.s_ray = 2;
    c.masking.s_fill = 4;
    c.encoder.channels = 2;
    c.encoder.stage_channels = [2, 2, 2, 2];
    c.encoder.depth_bins = 4;
    c.temporal.strategy = strategy;
    c.temporal.heads = 1;
    c.temporal.points = 2;
    c.temporal.query_channels = 2;
    c.renderer.samples = 6;
    c.renderer.hidden = 4;
    c.renderer.geo_features = 2;
    c.renderer.jitter = false;
    c
}

/// A rendered toy clip matching `cfg`.
pub fn toy_clip(cfg: &Config, seed: u64) -> MultiViewClip {
    let s = &cfg.scene;
    let cams = default_cameras(s.views, s.width, s.height, s.focal, s.mount_height).expect("valid toy camera");
    let scene = random_scene(&SceneParams { objects: s.objects, ..SceneParams::default() }, &mut rng::stream(seed, &[0x70]));
    render_clip(&scene, &cams, &linear_trajectory(s.window, s.ego_speed, s.dt), &cfg.render_settings(seed)).expect("toy clip renders")
}

/// Retries `attempt(i)` over fresh draws until `needed` succeed, skipping
/// draws that land on a kink. Returns the worst error, or a note.
fn over_draws(needed: usize, budget: u64, mut attempt: impl FnMut(u64) -> Result<f64, GradcheckError>) -> (Option<f64>, String) {
    let (mut worst, mut ok, mut kinks) = (0.0f64, 0, 0);
    for i in 0..budget {
        match attempt(i) {
            Ok(e) => {
                worst = worst.max(e);
                ok += 1;
                if ok == needed {
                    return (Some(worst), format!("{ok} draws, {kinks} on kinks"));
                }
            }
            Err(GradcheckError::NonDifferentiable { .. }) => kinks += 1,
            Err(e) => return (None, e.to_string()),
        }
    }
    (None, format!("only {ok} of {needed} draws off kinks"))
}

/// Gradcheck of the whole pipeline for `cfg` at freshly drawn parameters.
/// Masks, drop index and normals are frozen at the base point.
fn pipeline_check(cfg: &Config, clip: &MultiViewClip, draw: u64) -> Result<f64, GradcheckError> {
    let params = init_params(cfg, 1000 + draw);
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let normals = {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false)?;
        let fwd = forward_pipeline(&mut tape, clip, cfg, &b, &mut rng::stream(draw, &[0x91]), &ForwardOptions::default()).map_err(as_diff_error)?;
        fwd.normals
    };
    let opts = ForwardOptions { jitter: false, normals: Some(normals) };
    let f = |tape: &mut Tape, v: &[Var]| {
        let b = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let fwd = forward_pipeline(tape, clip, cfg, &b, &mut rng::stream(draw, &[0x91]), &opts).map_err(as_diff_error)?;
        Ok(fwd.loss)
    };
    let g = GradcheckOptions { perturbation: 1e-6, max_entries_per_input: Some(6), seed: draw, ..Default::default() };
    Ok(gradcheck(f, &inputs, &g)?.max_rel_error)
}

fn deform_check(draw: u64) -> Result<f64, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + draw);
    let e = GridExtent { min: [0.0, 0.0, 0.0], max: [4.0, 4.0, 1.0], dims: [4, 4, 1] };
    let spec = AttnSpec { prefix: "attn", heads: 2, points: 2, slots: 2, query_channels: 4, source_channels: 4 };
    let params = init_attention(&spec, &mut rng);
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for _ in 0..3 {
        inputs.push(Tensor::from_fn(&[4, 4, 4], |_| rng.gen_range(-1.0..1.0)));
    }
    let refs0 = reference_points(&e, &EgoPose::identity(), &EgoPose::identity());
    let refs1 = reference_points(&e, &EgoPose::identity(), &EgoPose::new(Rigid::translation([0.37, -0.21, 0.0]), 1));
    let n = names.len();
    let f = |tape: &mut Tape, v: &[Var]| {
        let b = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let out = deform_attn(tape, v[n], &[(0, v[n + 1], refs0.clone()), (1, v[n + 2], refs1.clone())], &spec, &b)?;
        let sq = tape.mul(out.output, out.output)?;
        tape.sum_all(sq)
    };
    let g = GradcheckOptions { perturbation: 1e-6, max_entries_per_input: Some(16), seed: draw, ..Default::default() };
    Ok(gradcheck(f, &inputs, &g)?.max_rel_error)
}

/// Every registered op plus three composed paths: encoder through the
/// rendering loss with no temporal module, deformable attention alone, and
/// the full pipeline with both temporal branches on a two-frame toy.
pub fn run_suite(op_instances: usize) -> Vec<CheckRow> {
    let mut rows: Vec<CheckRow> = registered_ops()
        .into_iter()
        .enumerate()
        .map(|(i, (name, builder))| {
            let (err, note) = match check_op(builder, op_instances, 17 + i as u64) {
                Ok(e) => (Some(e), format!("{op_instances} instances")),
                Err(e) => (None, e.to_string()),
            };
            CheckRow { name: name.to_string(), kind: CheckKind::Op, max_rel_error: err, tolerance: OP_TOLERANCE, note }
        })
        .collect();

    let none = toy_config(Strategy::None, 1);
    let clip = toy_clip(&none, 3);
    let (err, note) = over_draws(2, 20, |d| pipeline_check(&none, &clip, d));
    rows.push(CheckRow { name: "encoder→render loss".into(), kind: CheckKind::Composition, max_rel_error: err, tolerance: COMPOSITION_TOLERANCE, note });

    let (err, note) = over_draws(2, 20, deform_check);
    rows.push(CheckRow { name: "deform_attn".into(), kind: CheckKind::Composition, max_rel_error: err, tolerance: COMPOSITION_TOLERANCE, note });

    let both = toy_config(Strategy::Both, 2);
    let clip = toy_clip(&both, 4);
    let (err, note) = over_draws(2, 20, |d| pipeline_check(&both, &clip, d));
    rows.push(CheckRow { name: "pipeline (both, 2 frames)".into(), kind: CheckKind::Composition, max_rel_error: err, tolerance: COMPOSITION_TOLERANCE, note });
    rows
}
