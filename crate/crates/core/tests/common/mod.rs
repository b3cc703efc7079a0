//! Helpers shared by integration test targets.
#![allow(dead_code)]

use voxmim::diffcore::{Tape, Tensor};
use voxmim::geometry::{sample_depths, Camera, EgoPose, Ray};
use voxmim::renderer::{accumulate, opacity};
use voxmim::scenegen::{trace_ray, AnalyticScene, Primitive};

pub const ORACLE_ALBEDO: [f64; 3] = [0.7, 0.45, 0.2];

/// Unit sphere resting on a ground plane in front of the ego, both with
/// the same albedo.
pub fn sphere_and_plane() -> AnalyticScene {
    AnalyticScene::new(vec![
        Primitive::ground(-0.6, ORACLE_ALBEDO),
        Primitive::sphere([5.0, 0.3, 0.4], 1.0, ORACLE_ALBEDO),
    ])
}

pub fn oracle_camera() -> Camera {
    Camera::mounted(40.0, 40.0, 64, 48, [0.0, 0.0, 0.6], 0.0, 0.05).unwrap()
}

pub struct OracleRay {
    pub predicted_depth: f64,
    pub predicted_rgb: [f64; 3],
    pub true_depth: f64,
    pub albedo: [f64; 3],
}

/// Volume-renders the analytic field of `scene` along every pixel ray that
/// hits a surface inside `[near, far]`, using `k` midpoint samples and
/// sharpness `a`. Sample colors are the albedo of the nearest primitive.
pub fn render_analytic(scene: &AnalyticScene, cam: &Camera, k: usize, near: f64, far: f64, a: f64) -> Vec<OracleRay> {
    let pose = EgoPose::identity();
    let mut rays: Vec<(Ray, f64, [f64; 3])> = Vec::new();
    for row in 0..cam.height {
        for col in 0..cam.width {
            let ray = voxmim::geometry::generate_ray(cam, (col as f64 + 0.5, row as f64 + 0.5), &pose).unwrap();
            if let Some(hit) = trace_ray(scene, &ray, 0.0, 100.0) {
                if hit.depth > near && hit.depth < far {
                    rays.push((ray, hit.depth, hit.albedo));
                }
            }
        }
    }
    let t = sample_depths::<rand_chacha::ChaCha8Rng>(near, far, k, None).unwrap();
    let r = rays.len();
    let mut sdf = Vec::with_capacity(r * k);
    let mut col = vec![0.0; 3 * r * k];
    for (i, (ray, _, _)) in rays.iter().enumerate() {
        for (j, &tj) in t.iter().enumerate() {
            let p = ray.at(tj);
            sdf.push(scene.sdf(p, 0.0));
            let c = scene.albedo_at(p, 0.0);
            for ch in 0..3 {
                col[(ch * r + i) * k + j] = c[ch];
            }
        }
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![r, k], sdf).unwrap()).unwrap();
    let la = tape.constant(Tensor::new(vec![1], vec![a.ln()]).unwrap()).unwrap();
    let colors = tape.constant(Tensor::new(vec![3, r, k], col).unwrap()).unwrap();
    let depths = tape.constant(Tensor::from_fn(&[r, k], |i| t[i % k])).unwrap();
    let alpha = opacity(&mut tape, s, la).unwrap();
    let out = accumulate(&mut tape, alpha, colors, depths).unwrap();
    let (d, rgb) = (tape.value(out.depth), tape.value(out.rgb));
    rays.iter()
        .enumerate()
        .map(|(i, (_, depth, albedo))| OracleRay {
            predicted_depth: d.data()[i],
            predicted_rgb: [rgb.data()[i], rgb.data()[r + i], rgb.data()[2 * r + i]],
            true_depth: *depth,
            albedo: *albedo,
        })
        .collect()
}
