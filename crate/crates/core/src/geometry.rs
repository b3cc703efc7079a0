//! Camera and ego-motion mathematics.
//!
//! Frames: cameras look along +z with x right and y down; the ego frame has
//! x forward, y left and z up. All distances are meters; pixel coordinates
//! are continuous with pixel `(col, row)` centered at `(col + 0.5, row + 0.5)`.

use rand::Rng;
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate intrinsics: fx={fx}, fy={fy}")]
    DegenerateIntrinsics { fx: f64, fy: f64 },
    #[error("rotation is not orthonormal with det +1")]
    InvalidRotation,
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("invalid depth range: near={near}, far={far}")]
    BadRange { near: f64, far: f64 },
    #[error("need at least 2 samples per ray, got {0}")]
    TooFewSamples(usize),
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let bt = transpose(b);
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = dot(a[i], bt[j]);
        }
    }
    c
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation by `angle` radians about +z.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation by `angle` radians about +x.
pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let p = mat_mul(m, &transpose(m));
    let ortho = (0..3).all(|i| (0..3).all(|j| (p[i][j] - IDENTITY[i][j]).abs() <= tol));
    ortho && (det(m) - 1.0).abs() <= tol
}

/// Rigid transform `x ↦ R x + t` mapping a source frame into a target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid { rotation: IDENTITY, translation: [0.0; 3] };

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation, 1e-6) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn translation(t: Vec3) -> Self {
        Self { rotation: IDENTITY, translation: t }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        mat_vec(&self.rotation, d)
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        Self { rotation: rt, translation: scale(mat_vec(&rt, self.translation), -1.0) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Self {
        Self {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }
}

/// World pose of the ego vehicle at one timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub world_from_ego: Rigid,
    pub index: usize,
}

impl EgoPose {
    pub fn identity() -> Self {
        Self { world_from_ego: Rigid::IDENTITY, index: 0 }
    }

    pub fn new(world_from_ego: Rigid, index: usize) -> Self {
        Self { world_from_ego, index }
    }
}

/// Pinhole camera rigidly mounted on the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_from_ego: Rigid,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, cam_from_ego: Rigid) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::DegenerateIntrinsics { fx, fy });
        }
        if !is_rotation(&cam_from_ego.rotation, 1e-6) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self { fx, fy, cx, cy, width, height, cam_from_ego })
    }

    /// Camera at `center` (ego frame) looking along heading `yaw` (radians,
    /// counter-clockwise from ego +x), tilted down by `pitch` radians.
    pub fn mounted(fx: f64, fy: f64, width: usize, height: usize, center: Vec3, yaw: f64, pitch: f64) -> Result<Self, GeometryError> {
        let heading = [yaw.cos(), yaw.sin(), 0.0];
        let down_axis = [0.0, 0.0, -1.0];
        let (sp, cp) = pitch.sin_cos();
        let forward = add(scale(heading, cp), scale(down_axis, sp));
        let down = sub(scale(down_axis, cp), scale(heading, sp));
        let right = cross(down, forward);
        let rotation = [right, down, forward];
        let translation = scale(mat_vec(&rotation, center), -1.0);
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height, Rigid { rotation, translation })
    }

    /// Camera center in ego coordinates.
    pub fn center_in_ego(&self) -> Vec3 {
        self.cam_from_ego.inverse().translation
    }

    /// Unit direction (camera frame) through continuous pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64) -> Vec3 {
        normalize([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
    }
}

/// A ray `o + t·d` in some frame, tagged with the pixel it was cast through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

/// Depths and positions of the samples along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub points: Vec<Vec3>,
}

/// Ray through pixel `(u, v)`, expressed in the world frame of `ego_pose`.
pub fn generate_ray(camera: &Camera, pixel: (f64, f64), ego_pose: &EgoPose) -> Result<Ray, GeometryError> {
    if !(camera.fx > 0.0 && camera.fy > 0.0) {
        return Err(GeometryError::DegenerateIntrinsics { fx: camera.fx, fy: camera.fy });
    }
    let (u, v) = pixel;
    if !(0.0..=camera.width as f64).contains(&u) || !(0.0..=camera.height as f64).contains(&v) {
        return Err(GeometryError::PixelOutOfBounds { u, v, width: camera.width, height: camera.height });
    }
    let ego_from_cam = camera.cam_from_ego.inverse();
    let world_from_cam = ego_pose.world_from_ego.compose(&ego_from_cam);
    Ok(Ray {
        origin: world_from_cam.translation,
        direction: normalize(world_from_cam.apply_dir(camera.back_project(u, v))),
        pixel,
    })
}

/// Stratified depths over `[near, far]`: bin midpoints, or one uniform draw
/// per bin when `jitter` is given.
pub fn sample_depths<R: Rng + ?Sized>(near: f64, far: f64, count: usize, jitter: Option<&mut R>) -> Result<Vec<f64>, GeometryError> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(GeometryError::BadRange { near, far });
    }
    if count < 2 {
        return Err(GeometryError::TooFewSamples(count));
    }
    let step = (far - near) / count as f64;
    let depths = match jitter {
        None => (0..count).map(|j| near + (j as f64 + 0.5) * step).collect(),
        Some(rng) => (0..count).map(|j| near + (j as f64 + rng.gen::<f64>()) * step).collect(),
    };
    Ok(depths)
}

pub fn sample_along_ray<R: Rng + ?Sized>(
    ray: &Ray,
    near: f64,
    far: f64,
    count: usize,
    jitter: Option<&mut R>,
) -> Result<RaySamples, GeometryError> {
    let depths = sample_depths(near, far, count, jitter)?;
    let points = depths.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySamples { depths, points })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, depth: f64 },
    /// Camera-frame z ≤ 0.
    Behind { depth: f64 },
}

pub fn project_point(camera: &Camera, ego_pose: &EgoPose, world_point: Vec3) -> Projection {
    let p_ego = ego_pose.world_from_ego.inverse().apply(world_point);
    let p = camera.cam_from_ego.apply(p_ego);
    if p[2] <= 0.0 {
        return Projection::Behind { depth: p[2] };
    }
    Projection::Visible { u: camera.fx * p[0] / p[2] + camera.cx, v: camera.fy * p[1] / p[2] + camera.cy, depth: p[2] }
}

/// Moves BEV-plane points (ego-frame x, y at z = 0) from frame `a` into the
/// coordinates of frame `b`.
pub fn warp_reference_points(points: &[[f64; 2]], pose_a: &EgoPose, pose_b: &EgoPose) -> Vec<[f64; 2]> {
    let b_from_a = pose_b.world_from_ego.inverse().compose(&pose_a.world_from_ego);
    points
        .iter()
        .map(|p| {
            let q = b_from_a.apply([p[0], p[1], 0.0]);
            [q[0], q[1]]
        })
        .collect()
}

/// Axis-aligned metric extent of a voxel lattice in an ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridExtent {
    pub min: Vec3,
    pub max: Vec3,
    /// Cells along (x, y, z).
    pub dims: [usize; 3],
}

impl GridExtent {
    pub fn cell_size(&self) -> Vec3 {
        [
            (self.max[0] - self.min[0]) / self.dims[0] as f64,
            (self.max[1] - self.min[1]) / self.dims[1] as f64,
            (self.max[2] - self.min[2]) / self.dims[2] as f64,
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Continuous lattice coordinate; cell centers sit at integers.
    pub fn to_lattice(&self, p: Vec3) -> Vec3 {
        let cs = self.cell_size();
        [(p[0] - self.min[0]) / cs[0] - 0.5, (p[1] - self.min[1]) / cs[1] - 0.5, (p[2] - self.min[2]) / cs[2] - 0.5]
    }

    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let cs = self.cell_size();
        [
            self.min[0] + (ix as f64 + 0.5) * cs[0],
            self.min[1] + (iy as f64 + 0.5) * cs[1],
            self.min[2] + (iz as f64 + 0.5) * cs[2],
        ]
    }

    /// Flat index `z·(H·W) + y·W + x` of the cell containing `p`, if inside.
    pub fn cell_of(&self, p: Vec3) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let cs = self.cell_size();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            idx[a] = (((p[a] - self.min[a]) / cs[a]).floor() as usize).min(self.dims[a] - 1);
        }
        Some((idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0])
    }

    /// BEV cell centers (x, y) in row-major (y, x) order.
    pub fn bev_centers(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.dims[0] * self.dims[1]);
        for iy in 0..self.dims[1] {
            for ix in 0..self.dims[0] {
                let c = self.cell_center(ix, iy, 0);
                out.push([c[0], c[1]]);
            }
        }
        out
    }
}
