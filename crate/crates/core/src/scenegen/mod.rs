//! Procedural driving-like scenes with exact signed distance fields.
//!
//! Scenes are unions of spheres, oriented boxes and planes with flat albedo.
//! They supply ground-truth color and depth for the rendering loss and an
//! analytic SDF for oracle checks of the renderer.

mod clip;

pub use clip::{
    default_cameras, linear_trajectory, render_clip, write_ppm, ClipError, DepthSample, Frame, Image, MultiViewClip,
    RenderSettings,
};

use rand::Rng;

use crate::geometry::{add, dot, mat_mul, mat_vec, norm, rot_z, scale, sub, transpose, Mat3, Ray, Rigid, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// `rotation` maps box-local axes into the scene frame.
    Cuboid { center: Vec3, half_extents: Vec3, rotation: Mat3 },
    /// Points with `normal·p > offset` are outside.
    Plane { normal: Vec3, offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Linear velocity in m/s.
    pub velocity: Vec3,
}

impl Primitive {
    pub fn sphere(center: Vec3, radius: f64, albedo: [f64; 3]) -> Self {
        Self { shape: Shape::Sphere { center, radius }, albedo, velocity: [0.0; 3] }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3, yaw: f64, albedo: [f64; 3]) -> Self {
        Self { shape: Shape::Cuboid { center, half_extents, rotation: rot_z(yaw) }, albedo, velocity: [0.0; 3] }
    }

    pub fn ground(height: f64, albedo: [f64; 3]) -> Self {
        Self { shape: Shape::Plane { normal: [0.0, 0.0, 1.0], offset: height }, albedo, velocity: [0.0; 3] }
    }

    pub fn with_velocity(mut self, velocity: Vec3) -> Self {
        self.velocity = velocity;
        self
    }

    /// Exact signed distance at `p`, `time` seconds after the reference pose.
    pub fn sdf(&self, p: Vec3, time: f64) -> f64 {
        let shift = scale(self.velocity, time);
        match self.shape {
            Shape::Sphere { center, radius } => norm(sub(p, add(center, shift))) - radius,
            Shape::Cuboid { center, half_extents, rotation } => {
                let local = mat_vec(&transpose(&rotation), sub(p, add(center, shift)));
                let q = [
                    local[0].abs() - half_extents[0],
                    local[1].abs() - half_extents[1],
                    local[2].abs() - half_extents[2],
                ];
                let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Plane { normal, offset } => dot(normal, sub(p, shift)) - offset,
        }
    }

    /// The same primitive expressed in another frame.
    pub fn transformed(&self, g: &Rigid) -> Self {
        let shape = match self.shape {
            Shape::Sphere { center, radius } => Shape::Sphere { center: g.apply(center), radius },
            Shape::Cuboid { center, half_extents, rotation } => {
                Shape::Cuboid { center: g.apply(center), half_extents, rotation: mat_mul(&g.rotation, &rotation) }
            }
            Shape::Plane { normal, offset } => {
                let n = g.apply_dir(normal);
                Shape::Plane { normal: n, offset: offset + dot(n, g.translation) }
            }
        };
        Self { shape, albedo: self.albedo, velocity: g.apply_dir(self.velocity) }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub albedo: [f64; 3],
    pub primitive: usize,
}

const HIT_EPS: f64 = 1e-7;
const MAX_STEPS: usize = 50_000;

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    /// Distance and index of the closest primitive; `+inf` for an empty scene.
    pub fn nearest(&self, p: Vec3, time: f64) -> (f64, Option<usize>) {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, prim)| (prim.sdf(p, time), Some(i)))
            .fold((f64::INFINITY, None), |best, cur| if cur.0 < best.0 { cur } else { best })
    }

    pub fn sdf(&self, p: Vec3, time: f64) -> f64 {
        self.nearest(p, time).0
    }

    /// Albedo of the primitive closest to `p`.
    pub fn albedo_at(&self, p: Vec3, time: f64) -> [f64; 3] {
        match self.nearest(p, time).1 {
            Some(i) => self.primitives[i].albedo,
            None => [0.0; 3],
        }
    }

    pub fn transformed(&self, g: &Rigid) -> Self {
        Self { primitives: self.primitives.iter().map(|p| p.transformed(g)).collect() }
    }
}

/// Sphere tracing from the ray origin; `None` when the ray leaves `far`.
pub fn trace_ray(scene: &AnalyticScene, ray: &Ray, time: f64, far: f64) -> Option<Hit> {
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let (d, idx) = scene.nearest(ray.at(t), time);
        let idx = idx?;
        if d < HIT_EPS {
            return Some(Hit { depth: t, albedo: scene.primitives[idx].albedo, primitive: idx });
        }
        t += d;
        if t > far {
            return None;
        }
    }
    None
}

/// Knobs for [`random_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub objects: usize,
    pub ground_height: f64,
    /// Object centers are drawn from this forward (x) range...
    pub forward_range: (f64, f64),
    /// ...and this lateral (y) range, in the reference ego frame.
    pub lateral_range: (f64, f64),
    /// Speed of moving objects in m/s; 0 makes the scene static.
    pub object_speed: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { objects: 4, ground_height: -0.6, forward_range: (3.0, 7.0), lateral_range: (-3.5, 3.5), object_speed: 0.0 }
    }
}

fn random_albedo<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)]
}

/// Ground plane plus `objects` spheres and boxes resting on it.
pub fn random_scene<R: Rng>(params: &SceneParams, rng: &mut R) -> AnalyticScene {
    let mut prims = vec![Primitive::ground(params.ground_height, [0.45, 0.42, 0.38])];
    for _ in 0..params.objects {
        let x = rng.gen_range(params.forward_range.0..=params.forward_range.1);
        let y = rng.gen_range(params.lateral_range.0..=params.lateral_range.1);
        let albedo = random_albedo(rng);
        let mut prim = if rng.gen_bool(0.5) {
            let r = rng.gen_range(0.5..1.0);
            Primitive::sphere([x, y, params.ground_height + r], r, albedo)
        } else {
            let half = [rng.gen_range(0.4..0.9), rng.gen_range(0.4..0.9), rng.gen_range(0.4..0.9)];
            let yaw = rng.gen_range(0.0..std::f64::consts::PI);
            Primitive::cuboid([x, y, params.ground_height + half[2]], half, yaw, albedo)
        };
        if params.object_speed > 0.0 {
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            prim = prim.with_velocity([params.object_speed * heading.cos(), params.object_speed * heading.sin(), 0.0]);
        }
        prims.push(prim);
    }
    AnalyticScene::new(prims)
}
