//! Pinhole camera, rigid poses with axis-angle rotations, dense rasters and
//! flow induction.
//!
//! Conventions used throughout the crate:
//!
//! * A relative pose `P^{i→j}` maps points expressed in camera `i`
//!   coordinates into camera `j` coordinates: `X_j = R·X_i + t`.
//! * An absolute pose `P^j` maps points from the first camera of the sequence
//!   into camera `j` ([`chain_relative_poses`]).
//! * Raster pixel `(col, row)` (zero based) samples the continuous image
//!   coordinate `(col + 0.5, row + 0.5)`; the principal point is the image
//!   center `(W/2, H/2)`.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn cross<T: Real>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Rotate `v` by the axis-angle vector `w` (Rodrigues).
///
/// Written in terms of `θ²` so the derivative stays finite at `w = 0`.
#[inline]
pub fn rotate<T: Real>(w: &[T; 3], v: &[T; 3]) -> [T; 3] {
    let th2 = dot(w, w);
    let (a, b) = if th2.re() < 1e-8 {
        (
            T::cst(1.0) - th2 / 6.0 + th2 * th2 / 120.0,
            T::cst(0.5) - th2 / 24.0 + th2 * th2 / 720.0,
        )
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (T::cst(1.0) - th.cos()) / th2)
    };
    let wv = cross(w, v);
    let wwv = cross(w, &wv);
    [
        v[0] + a * wv[0] + b * wwv[0],
        v[1] + a * wv[1] + b * wwv[1],
        v[2] + a * wv[2] + b * wwv[2],
    ]
}

/// `R(w)·p + t`.
#[inline]
pub fn transform<T: Real>(w: &[T; 3], t: &[T; 3], p: &[T; 3]) -> [T; 3] {
    let r = rotate(w, p);
    [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
}

/// Rotation matrix of an axis-angle vector.
pub fn rotation_from_axis_angle(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let w = [axis_angle.x, axis_angle.y, axis_angle.z];
    let mut m = Matrix3::zeros();
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let col = rotate(&w, &e);
        for r in 0..3 {
            m[(r, c)] = col[r];
        }
    }
    m
}

/// Axis-angle vector of a rotation matrix, angle in `[0, π]`.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let rot = Rotation3::from_matrix_unchecked(*r);
    UnitQuaternion::from_rotation_matrix(&rot).scaled_axis()
}

/// Simplified pinhole camera: one focal length, principal point at the
/// image center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pinhole {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Pinhole {
    pub fn new(focal: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::InvalidCamera(format!("focal must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            focal,
            width,
            height,
        })
    }

    pub fn with_focal(&self, focal: f64) -> Result<Self> {
        Self::new(focal, self.width, self.height)
    }

    pub fn cx(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height as f64 / 2.0
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous coordinate sampled by raster pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> Vector2<f64> {
        Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>> {
        if point.z <= 0.0 {
            return Err(Error::BehindCamera { z: point.z });
        }
        let p = project_raw(self.focal, self.cx(), self.cy(), &[point.x, point.y, point.z]);
        Ok(Vector2::new(p[0], p[1]))
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        let p = unproject_raw(self.focal, self.cx(), self.cy(), pixel.x, pixel.y, depth);
        Ok(Vector3::new(p[0], p[1], p[2]))
    }

    /// True when a continuous coordinate lies inside the image rectangle.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= self.width as f64 && y <= self.height as f64
    }
}

/// Projection kernel; the caller guarantees `p[2] > 0`.
#[inline]
pub fn project_raw<T: Real>(focal: T, cx: f64, cy: f64, p: &[T; 3]) -> [T; 2] {
    let iz = p[2].recip();
    [focal * p[0] * iz + cx, focal * p[1] * iz + cy]
}

#[inline]
pub fn unproject_raw<T: Real>(focal: T, cx: f64, cy: f64, u: f64, v: f64, depth: T) -> [T; 3] {
    let s = depth / focal;
    [s * (u - cx), s * (v - cy), depth]
}

/// Rigid transform with the rotation stored as an axis-angle vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub axis_angle: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn new(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            axis_angle,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Vector3::zeros(), t)
    }

    /// Six parameters `[ωx, ωy, ωz, tx, ty, tz]`.
    pub fn from_params(p: &[f64]) -> Self {
        Self::new(Vector3::new(p[0], p[1], p[2]), Vector3::new(p[3], p[4], p[5]))
    }

    pub fn params(&self) -> [f64; 6] {
        let (w, t) = (&self.axis_angle, &self.translation);
        [w.x, w.y, w.z, t.x, t.y, t.z]
    }

    pub fn from_rotation_translation(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self::new(axis_angle_from_rotation(r), t)
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Self::from_rotation_translation(&r, Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_axis_angle(&self.axis_angle)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(self.axis_angle)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `M(self)·M(other)`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let ra = self.rotation();
        let r = ra * other.rotation();
        PoseSE3::from_rotation_translation(&r, ra * other.translation + self.translation)
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation().transpose();
        PoseSE3::new(-self.axis_angle_canonical(), -(rt * self.translation))
    }

    fn axis_angle_canonical(&self) -> Vector3<f64> {
        axis_angle_from_rotation(&self.rotation())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation
    }

    /// Geodesic rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.axis_angle_canonical().norm()
    }

    /// Position of the camera center when `self` maps world points into the
    /// camera frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation)
    }
}

/// Dense single- or multi-valued raster in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear interpolation weights for a continuous coordinate, clamped to
    /// the raster.
    #[inline]
    pub(crate) fn bilinear_taps(&self, x: f64, y: f64) -> [(usize, f64); 4] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (fx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (fy.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let w = self.width;
        [
            (y0 * w + x0, (1.0 - ax) * (1.0 - ay)),
            (y0 * w + x1, ax * (1.0 - ay)),
            (y1 * w + x0, (1.0 - ax) * ay),
            (y1 * w + x1, ax * ay),
        ]
    }
}

impl Grid<f64> {
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        self.bilinear_taps(x, y)
            .iter()
            .map(|&(i, w)| w * self.data[i])
            .sum()
    }
}

impl Grid<[f64; 2]> {
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (i, w) in self.bilinear_taps(x, y) {
            out[0] += w * self.data[i][0];
            out[1] += w * self.data[i][1];
        }
        out
    }
}

pub type Mask = Grid<bool>;

/// Per-pixel depth along the optical axis, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some(bad) = grid.data.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::NonPositiveDepth(*bad));
        }
        Ok(Self(grid))
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(Grid::filled(width, height, depth))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.0.get(col, row)
    }
}

/// Dense optical flow in pixels, `[du, dv]` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap(Grid<[f64; 2]>);

impl FlowMap {
    pub fn new(grid: Grid<[f64; 2]>) -> Result<Self> {
        if grid.data.iter().any(|f| !(f[0].is_finite() && f[1].is_finite())) {
            return Err(Error::InvalidRaster("flow contains non-finite values".into()));
        }
        Ok(Self(grid))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, [0.0; 2]))
    }

    pub fn grid(&self) -> &Grid<[f64; 2]> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<[f64; 2]> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> [f64; 2] {
        self.0.get(col, row)
    }
}

/// Flow induced at one pixel by moving the camera with `(w, t)`; `None` when
/// the transformed point is not in front of the camera.
#[inline]
pub fn induced_flow_at<T: Real>(
    w: &[T; 3],
    t: &[T; 3],
    focal: T,
    cx: f64,
    cy: f64,
    u: f64,
    v: f64,
    depth: T,
) -> Option<[T; 2]> {
    let x = unproject_raw(focal, cx, cy, u, v, depth);
    let y = transform(w, t, &x);
    if y[2].re() <= 0.0 {
        return None;
    }
    let p = project_raw(focal, cx, cy, &y);
    Some([p[0] - u, p[1] - v])
}

/// Optical flow implied by `pose` and `depth` under a static world, with a
/// mask that is `false` where the moved point ends up behind the camera.
pub fn induced_flow(pose: &PoseSE3, depth: &DepthMap, cam: &Pinhole) -> Result<(FlowMap, Mask)> {
    if depth.width() != cam.width || depth.height() != cam.height {
        return Err(Error::DimensionMismatch(format!(
            "depth {}x{} vs camera {}x{}",
            depth.width(),
            depth.height(),
            cam.width,
            cam.height
        )));
    }
    let p = pose.params();
    let w = [p[0], p[1], p[2]];
    let t = [p[3], p[4], p[5]];
    let (cx, cy) = (cam.cx(), cam.cy());
    let mut flow = Grid::filled(cam.width, cam.height, [0.0; 2]);
    let mut mask = Grid::filled(cam.width, cam.height, false);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let c = Pinhole::pixel_center(col, row);
            if let Some(f) =
                induced_flow_at(&w, &t, cam.focal, cx, cy, c.x, c.y, depth.get(col, row))
            {
                flow.set(col, row, f);
                mask.set(col, row, true);
            }
        }
    }
    Ok((FlowMap(flow), mask))
}

/// Absolute poses from relative ones: `P^j` maps first-frame points through
/// `P^{1→2}`, then `P^{2→3}`, up to `P^{j→j+1}`. Output has the input length;
/// the identity pose of the first frame is implicit.
pub fn chain_relative_poses(rel: &[PoseSE3]) -> Result<Vec<PoseSE3>> {
    if rel.is_empty() {
        return Err(Error::EmptyInput("relative pose sequence"));
    }
    let mut out: Vec<PoseSE3> = Vec::with_capacity(rel.len());
    for r in rel {
        let next = match out.last() {
            Some(prev) => r.compose(prev),
            None => *r,
        };
        out.push(next);
    }
    Ok(out)
}

/// Inverse of [`chain_relative_poses`].
pub fn consecutive_differences(abs: &[PoseSE3]) -> Vec<PoseSE3> {
    abs.iter()
        .enumerate()
        .map(|(i, a)| if i == 0 { *a } else { a.compose(&abs[i - 1].inverse()) })
        .collect()
}

/// Full trajectory (one pose per frame, first frame at the identity) from
/// relative poses between consecutive frames.
pub fn trajectory_from_relative(rel: &[PoseSE3]) -> Vec<PoseSE3> {
    let mut out = vec![PoseSE3::identity()];
    if let Ok(chained) = chain_relative_poses(rel) {
        out.extend(chained);
    }
    out
}

/// Relative poses between consecutive frames of a full trajectory.
pub fn relative_from_trajectory(abs: &[PoseSE3]) -> Vec<PoseSE3> {
    abs.windows(2).map(|w| w[1].compose(&w[0].inverse())).collect()
}

/// Relative pose `P^{i→j}` between two absolute poses.
pub fn relative_between(from: &PoseSE3, to: &PoseSE3) -> PoseSE3 {
    to.compose(&from.inverse())
}
