//! Synthetic dynamic scenes with exact depth, optical flow and motion masks.
//!
//! The world frame is the first camera. Scenes consist of a fronto-parallel
//! background plane and axis-aligned boxes, some of which move with a
//! constant velocity. Rendering is analytic: every pixel ray is intersected
//! with the plane and the boxes, and flow is obtained by moving the hit point
//! with its surface and projecting it into the neighbouring camera.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    relative_from_trajectory, DepthMap, FlowMap, Grid, Mask, Pinhole, PoseSE3,
};

/// Axis-aligned box, optionally moving with a constant velocity per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl SceneBox {
    pub fn is_mover(&self) -> bool {
        self.velocity != Vector3::zeros()
    }

    fn center_at(&self, frame: usize) -> Vector3<f64> {
        self.center + self.velocity * frame as f64
    }

    fn contains(&self, p: &Vector3<f64>, frame: usize) -> bool {
        let d = (p - self.center_at(frame)).abs();
        d.x < self.half_extents.x && d.y < self.half_extents.y && d.z < self.half_extents.z
    }

    /// Slab test; returns the entry distance along the ray.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, frame: usize) -> Option<f64> {
        let c = self.center_at(frame);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            let lo = c[k] - self.half_extents[k];
            let hi = c[k] + self.half_extents[k];
            if dir[k].abs() < 1e-15 {
                if origin[k] < lo || origin[k] > hi {
                    return None;
                }
                continue;
            }
            let a = (lo - origin[k]) / dir[k];
            let b = (hi - origin[k]) / dir[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 >= t0 && t0 > 0.0).then_some(t0)
    }
}

/// Parametric camera motion. Poses are camera-to-world placements of each
/// frame; the first frame is always the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CameraPath {
    Identity,
    /// Constant velocity, no rotation.
    Straight { velocity: Vector3<f64> },
    /// Orbit around a pivot on the optical axis at distance `radius`.
    Arc { radius: f64, angle_per_frame: f64 },
    /// Constant angular velocity (axis-angle per frame) plus translation.
    RotationDominant {
        angular_velocity: Vector3<f64>,
        velocity: Vector3<f64>,
    },
    /// Straight motion with seeded random rotation/translation jitter.
    HandheldJitter {
        velocity: Vector3<f64>,
        rot_jitter: f64,
        trans_jitter: f64,
    },
}

impl CameraPath {
    fn camera_to_world(&self, frame: usize, rng: &mut ChaCha8Rng) -> PoseSE3 {
        let j = frame as f64;
        match self {
            CameraPath::Identity => PoseSE3::identity(),
            CameraPath::Straight { velocity } => PoseSE3::from_translation(velocity * j),
            CameraPath::Arc {
                radius,
                angle_per_frame,
            } => {
                let th = angle_per_frame * j;
                let w = Vector3::new(0.0, th, 0.0);
                let pivot = Vector3::new(0.0, 0.0, *radius);
                let r = crate::geometry::rotation_from_axis_angle(&w);
                PoseSE3::new(w, pivot + r * Vector3::new(0.0, 0.0, -radius))
            }
            CameraPath::RotationDominant {
                angular_velocity,
                velocity,
            } => PoseSE3::new(angular_velocity * j, velocity * j),
            CameraPath::HandheldJitter {
                velocity,
                rot_jitter,
                trans_jitter,
            } => {
                if frame == 0 {
                    return PoseSE3::identity();
                }
                let n = Normal::new(0.0, 1.0).expect("unit normal");
                let mut v = || n.sample(rng);
                let w = Vector3::new(v(), v(), v()) * *rot_jitter;
                let t = velocity * j + Vector3::new(v(), v(), v()) * *trans_jitter;
                PoseSE3::new(w, t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    /// Depth of the fronto-parallel background plane in world coordinates.
    pub plane_depth: f64,
    pub boxes: Vec<SceneBox>,
    pub camera_path: CameraPath,
    pub seed: u64,
}

impl SceneSpec {
    /// Plane plus `static_boxes` random boxes in front of it.
    pub fn random_static(
        width: usize,
        height: usize,
        focal: f64,
        frames: usize,
        camera_path: CameraPath,
        static_boxes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0c5);
        let plane_depth = 5.0;
        let half_w = 0.5 * width as f64 / focal;
        let half_h = 0.5 * height as f64 / focal;
        let boxes = (0..static_boxes)
            .map(|_| {
                let z = rng.gen_range(2.0..3.8);
                let hx = rng.gen_range(0.15..0.45) * half_w * z;
                let hy = rng.gen_range(0.15..0.45) * half_h * z;
                SceneBox {
                    center: Vector3::new(
                        rng.gen_range(-0.7..0.7) * half_w * z,
                        rng.gen_range(-0.7..0.7) * half_h * z,
                        z,
                    ),
                    half_extents: Vector3::new(hx, hy, rng.gen_range(0.1..0.5)),
                    velocity: Vector3::zeros(),
                }
            })
            .collect();
        Self {
            width,
            height,
            focal,
            frames,
            plane_depth,
            boxes,
            camera_path,
            seed,
        }
    }

    /// Add a mover whose front face covers roughly `coverage` of the first
    /// frame, centered at image offset `offset` (fractions of the image
    /// size), at depth `depth` and moving with `velocity`.
    pub fn with_mover(
        mut self,
        coverage: f64,
        offset: Vector2<f64>,
        depth: f64,
        velocity: Vector3<f64>,
    ) -> Result<Self> {
        if !(0.0..=0.6).contains(&coverage) {
            return Err(Error::InvalidConfig(format!(
                "mover coverage must lie in [0, 0.6], got {coverage}"
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let half_depth = 0.05;
        let front = depth - half_depth;
        let s = coverage.sqrt();
        let hx = 0.5 * w * s * front / self.focal;
        let hy = 0.5 * h * s * front / self.focal;
        self.boxes.push(SceneBox {
            center: Vector3::new(offset.x * w * depth / self.focal, offset.y * h * depth / self.focal, depth),
            half_extents: Vector3::new(hx, hy, half_depth),
            velocity,
        });
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::InvalidConfig("scene needs positive size and focal".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidConfig("scene needs at least one frame".into()));
        }
        if !(self.plane_depth > 0.0) {
            return Err(Error::InvalidConfig("plane depth must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth and observations of one synthetic sequence.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub camera: Pinhole,
    /// World-to-camera poses, first frame at the identity.
    pub gt_absolute_poses: Vec<PoseSE3>,
    /// `P^{i→i+1}` for consecutive frames.
    pub gt_relative_poses: Vec<PoseSE3>,
    pub depths: Vec<DepthMap>,
    /// `F^{i→i+1}`.
    pub flow_fwd: Vec<FlowMap>,
    /// `F^{i+1→i}`.
    pub flow_bwd: Vec<FlowMap>,
    /// True where a moving object is visible, per frame.
    pub motion_masks: Vec<Mask>,
}

impl SyntheticSequence {
    pub fn frames(&self) -> usize {
        self.depths.len()
    }

    pub fn focal(&self) -> f64 {
        self.camera.focal
    }
}

struct Hit {
    point: Vector3<f64>,
    depth: f64,
    surface: Option<usize>,
}

fn cast(
    spec: &SceneSpec,
    cam: &Pinhole,
    cam_to_world: &PoseSE3,
    frame: usize,
    col: usize,
    row: usize,
) -> Result<Hit> {
    let c = Pinhole::pixel_center(col, row);
    cast_at(spec, cam, cam_to_world, frame, c.x, c.y)
}

fn cast_at(
    spec: &SceneSpec,
    cam: &Pinhole,
    cam_to_world: &PoseSE3,
    frame: usize,
    x: f64,
    y: f64,
) -> Result<Hit> {
    let c = Vector2::new(x, y);
    let d_cam = Vector3::new((c.x - cam.cx()) / cam.focal, (c.y - cam.cy()) / cam.focal, 1.0);
    let origin = cam_to_world.translation;
    let dir = cam_to_world.rotation() * d_cam;
    let mut best: Option<(f64, Option<usize>)> = None;
    if dir.z > 1e-12 {
        let t = (spec.plane_depth - origin.z) / dir.z;
        if t > 0.0 {
            best = Some((t, None));
        }
    }
    for (k, b) in spec.boxes.iter().enumerate() {
        if let Some(t) = b.intersect(&origin, &dir, frame) {
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, Some(k)));
            }
        }
    }
    let (t, surface) = best.ok_or_else(|| {
        Error::InvalidConfig(format!("image point ({x},{y}) of frame {frame} sees no geometry"))
    })?;
    // d_cam has unit z, so the ray parameter is the camera-frame depth.
    Ok(Hit {
        point: origin + dir * t,
        depth: t,
        surface,
    })
}

/// Render depth, exact forward/backward flow and motion masks.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let cam = Pinhole::new(spec.focal, spec.width, spec.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let placements: Vec<PoseSE3> = (0..spec.frames)
        .map(|j| spec.camera_path.camera_to_world(j, &mut rng))
        .collect();
    for (j, p) in placements.iter().enumerate() {
        let o = p.translation;
        if o.z >= spec.plane_depth {
            return Err(Error::CameraInsideGeometry(format!(
                "camera {j} is behind the background plane"
            )));
        }
        if let Some(k) = spec.boxes.iter().position(|b| b.contains(&o, j)) {
            return Err(Error::CameraInsideGeometry(format!("camera {j} is inside box {k}")));
        }
    }
    let world_to_cam: Vec<PoseSE3> = placements.iter().map(|p| p.inverse()).collect();

    let mut depths = Vec::with_capacity(spec.frames);
    let mut hits_per_frame = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for j in 0..spec.frames {
        let mut hits = Vec::with_capacity(cam.pixel_count());
        for row in 0..cam.height {
            for col in 0..cam.width {
                hits.push(cast(spec, &cam, &placements[j], j, col, row)?);
            }
        }
        depths.push(DepthMap::new(Grid::from_vec(
            cam.width,
            cam.height,
            hits.iter().map(|h| h.depth).collect(),
        )?)?);
        masks.push(Grid::from_vec(
            cam.width,
            cam.height,
            hits.iter()
                .map(|h| h.surface.is_some_and(|k| spec.boxes[k].is_mover()))
                .collect(),
        )?);
        hits_per_frame.push(hits);
    }

    let displace = |hits: &[Hit], to: &PoseSE3, step: f64| -> Result<FlowMap> {
        let mut data = Vec::with_capacity(hits.len());
        for (i, h) in hits.iter().enumerate() {
            let moved = match h.surface {
                Some(k) => h.point + spec.boxes[k].velocity * step,
                None => h.point,
            };
            let q = to.transform_point(&moved);
            let c = Pinhole::pixel_center(i % cam.width, i / cam.width);
            data.push(match cam.project(&q) {
                Ok(p) => [p.x - c.x, p.y - c.y],
                Err(_) => [0.0, 0.0],
            });
        }
        FlowMap::new(Grid::from_vec(cam.width, cam.height, data)?)
    };

    let mut flow_fwd = Vec::new();
    let mut flow_bwd = Vec::new();
    for j in 0..spec.frames.saturating_sub(1) {
        flow_fwd.push(displace(&hits_per_frame[j], &world_to_cam[j + 1], 1.0)?);
        flow_bwd.push(displace(&hits_per_frame[j + 1], &world_to_cam[j], -1.0)?);
    }

    Ok(SyntheticSequence {
        camera: cam,
        gt_relative_poses: relative_from_trajectory(&world_to_cam),
        gt_absolute_poses: world_to_cam,
        depths,
        flow_fwd,
        flow_bwd,
        motion_masks: masks,
    })
}

/// Exact flow from frame `from` to frame `to` at continuous image point
/// `(x, y)`, together with the world point seen there. Used to check flow
/// chaining without interpolation error.
pub fn exact_flow_at(
    spec: &SceneSpec,
    from: usize,
    to: usize,
    x: f64,
    y: f64,
) -> Result<([f64; 2], Vector3<f64>)> {
    spec.validate()?;
    let cam = Pinhole::new(spec.focal, spec.width, spec.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let placements: Vec<PoseSE3> = (0..spec.frames)
        .map(|j| spec.camera_path.camera_to_world(j, &mut rng))
        .collect();
    let hit = cast_at(spec, &cam, &placements[from], from, x, y)?;
    let moved = match hit.surface {
        Some(k) => hit.point + spec.boxes[k].velocity * (to as f64 - from as f64),
        None => hit.point,
    };
    let q = placements[to].inverse().transform_point(&moved);
    let p = cam.project(&q)?;
    Ok(([p.x - x, p.y - y], moved))
}

/// Noise applied to the observations of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of additive Gaussian flow noise, pixels.
    pub flow_sigma: f64,
    /// Standard deviation of the log of a multiplicative depth factor.
    pub depth_rel_sigma: f64,
    pub seed: u64,
}

/// Corrupt depth and flow observations; ground-truth poses are untouched.
pub fn perturb(seq: &SyntheticSequence, noise: &NoiseSpec) -> Result<SyntheticSequence> {
    if !(noise.flow_sigma >= 0.0 && noise.depth_rel_sigma >= 0.0) {
        return Err(Error::InvalidConfig("noise levels must be nonnegative".into()));
    }
    let mut out = seq.clone();
    if noise.flow_sigma == 0.0 && noise.depth_rel_sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    if noise.flow_sigma > 0.0 {
        for flow in out.flow_fwd.iter_mut().chain(out.flow_bwd.iter_mut()) {
            let mut g = flow.grid().clone();
            for f in &mut g.data {
                f[0] += noise.flow_sigma * n.sample(&mut rng);
                f[1] += noise.flow_sigma * n.sample(&mut rng);
            }
            *flow = FlowMap::new(g)?;
        }
    }
    if noise.depth_rel_sigma > 0.0 {
        for depth in &mut out.depths {
            let mut g = depth.grid().clone();
            for d in &mut g.data {
                *d *= (noise.depth_rel_sigma * n.sample(&mut rng)).exp();
            }
            *depth = DepthMap::new(g)?;
        }
    }
    Ok(out)
}

/// Rotation-dominant camera path with a random axis, used by tests and the
/// toy training corpus.
pub fn random_rotation_path(rng: &mut impl Rng, deg_per_frame: f64, trans_per_frame: f64) -> CameraPath {
    let mut axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3));
    if axis.norm() < 1e-3 {
        axis = Vector3::y();
    }
    let mut dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    if dir.norm() < 1e-3 {
        dir = Vector3::x();
    }
    CameraPath::RotationDominant {
        angular_velocity: axis.normalize() * deg_per_frame.to_radians(),
        velocity: dir.normalize() * trans_per_frame,
    }
}
