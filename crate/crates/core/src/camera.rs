//! Pinhole cameras, rigid SE(3) poses, rigid flow synthesis and depth reprojection.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{sample_into, GridError, TensorGrid, ValidityMask};

/// Points transformed to `z <= Z_MIN` (meters) are treated as behind the camera.
pub const Z_MIN: f64 = 1e-6;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid pose: {0}")]
    Pose(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = CameraError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(CameraError::Intrinsics(format!("focal lengths must be positive, got fx={fx}, fy={fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(CameraError::Intrinsics("principal point must be finite".into()));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel coordinate of a camera-frame point (z must be positive).
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Intrinsics as the 4-vector tensor `(fx, fy, cx, cy)`.
    pub fn to_grid(&self) -> TensorGrid {
        TensorGrid::f64_unchecked(vec![4], vec![self.fx, self.fy, self.cx, self.cy])
    }

    pub fn from_grid(grid: &TensorGrid) -> Result<Self> {
        if grid.dims() != [4] {
            return Err(CameraError::Intrinsics(format!("expected dims [4], got {:?}", grid.dims())));
        }
        Self::new(grid.get(0), grid.get(1), grid.get(2), grid.get(3))
    }
}

impl TryFrom<[f64; 4]> for Intrinsics {
    type Error = CameraError;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Intrinsics::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Intrinsics> for [f64; 4] {
    fn from(k: Intrinsics) -> Self {
        [k.fx, k.fy, k.cx, k.cy]
    }
}

/// Back-projects pixel `(u, v)` at metric depth `depth` into the camera frame.
pub fn unproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(CameraError::Domain(format!("depth must be positive and finite, got {depth}")));
    }
    Ok(Vector3::new(depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth))
}

/// World-to-camera rigid transform, `x_cam = R * x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 3]", into = "[[f64; 4]; 3]")]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= ROTATION_TOL) {
            return Err(CameraError::Pose(format!("R^T R deviates from identity by {ortho:e}")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(CameraError::Pose(format!("det(R) = {det}, expected +1")));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(CameraError::Pose("translation must be finite".into()));
        }
        Ok(PoseSE3 { rotation, translation })
    }

    pub fn identity() -> Self {
        PoseSE3 { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3 { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation given as an axis-angle vector (radians) followed by the translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 { rotation: Rotation3::from_scaled_axis(axis_angle).into_inner(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
        ]
    }

    pub fn from_rows(rows: [[f64; 4]; 3]) -> Result<Self> {
        let r = Matrix3::from_fn(|i, j| rows[i][j]);
        let t = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        PoseSE3::new(r, t)
    }

    /// Extrinsics as the 3x4 row-major `[R|t]` tensor.
    pub fn to_grid(&self) -> TensorGrid {
        TensorGrid::f64_unchecked(vec![3, 4], self.to_rows().iter().flatten().copied().collect())
    }

    pub fn from_grid(grid: &TensorGrid) -> Result<Self> {
        if grid.dims() != [3, 4] {
            return Err(CameraError::Pose(format!("expected dims [3, 4], got {:?}", grid.dims())));
        }
        let mut rows = [[0.0; 4]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = grid.get(i * 4 + j);
            }
        }
        Self::from_rows(rows)
    }
}

impl TryFrom<[[f64; 4]; 3]> for PoseSE3 {
    type Error = CameraError;
    fn try_from(rows: [[f64; 4]; 3]) -> Result<Self> {
        PoseSE3::from_rows(rows)
    }
}

impl From<PoseSE3> for [[f64; 4]; 3] {
    fn from(p: PoseSE3) -> Self {
        p.to_rows()
    }
}

/// Maps camera-a coordinates to camera-b coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeTransform(PoseSE3);

impl RelativeTransform {
    pub fn identity() -> Self {
        RelativeTransform(PoseSE3::identity())
    }

    pub fn from_pose(pose: PoseSE3) -> Self {
        RelativeTransform(pose)
    }

    pub fn as_pose(&self) -> &PoseSE3 {
        &self.0
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_point(p)
    }
}

/// `T = E_b * E_a^-1`, so that `T(x_cam_a) = x_cam_b`.
pub fn relative_transform(e_a: &PoseSE3, e_b: &PoseSE3) -> RelativeTransform {
    RelativeTransform(e_b.compose(&e_a.inverse()))
}

fn depth_plane(depth: &TensorGrid) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = depth.hwc()?;
    if c != 1 {
        return Err(GridError::Shape(format!("depth must be H x W, got {:?}", depth.dims())).into());
    }
    Ok((h, w, depth.float_values()?))
}

/// Where pixel `(x, y)` with depth `d` lands in the other view, or `None` when
/// the depth is invalid or the point ends up behind the camera.
#[inline]
fn transfer(x: f64, y: f64, d: f64, k_src: &Intrinsics, k_dst: &Intrinsics, t: &RelativeTransform) -> Option<(f64, f64, f64)> {
    if !(d > 0.0) {
        return None;
    }
    let p = Vector3::new(d * (x - k_src.cx) / k_src.fx, d * (y - k_src.cy) / k_src.fy, d);
    let q = t.apply(&p);
    if !(q.z > Z_MIN) {
        return None;
    }
    let (u, v) = k_dst.project(&q);
    Some((u, v, q.z))
}

/// Flow a static scene would show under the camera motion `t`.
///
/// `flow(u) = project(T(unproject(u, D(u), K_src)), K_dst) - u`. Pixels with
/// `D(u) <= 0` or a transformed depth at or below [`Z_MIN`] are invalid and
/// carry zero flow.
pub fn rigid_flow(
    depth: &TensorGrid,
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t: &RelativeTransform,
) -> Result<(TensorGrid, ValidityMask)> {
    let (h, w, d) = depth_plane(depth)?;
    let mut flow = vec![0.0; h * w * 2];
    let mut valid = vec![false; h * w];
    flow.par_chunks_mut(2 * w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (frow, vrow))| {
            for x in 0..w {
                if let Some((u, v, _)) = transfer(x as f64, y as f64, d[y * w + x], k_src, k_dst, t) {
                    frow[2 * x] = u - x as f64;
                    frow[2 * x + 1] = v - y as f64;
                    vrow[x] = true;
                }
            }
        });
    Ok((TensorGrid::f64_unchecked(vec![h, w, 2], flow), ValidityMask::from_bits(h, w, valid)?))
}

/// Forward-splats source depth into the target view.
///
/// Each valid source pixel writes its post-transform depth into the nearest
/// target cell; collisions keep the nearest surface, ties keep the first
/// writer in row-major order. The returned mask is `true` where some source
/// pixel landed and `false` at holes.
pub fn reproject_depth(
    depth: &TensorGrid,
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t: &RelativeTransform,
) -> Result<(TensorGrid, ValidityMask)> {
    let (h, w, d) = depth_plane(depth)?;
    let mut zbuf = vec![f64::INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let Some((u, v, z)) = transfer(x as f64, y as f64, d[y * w + x], k_src, k_dst, t) else {
                continue;
            };
            let (cu, cv) = (u.round(), v.round());
            if cu < 0.0 || cv < 0.0 || cu > (w - 1) as f64 || cv > (h - 1) as f64 {
                continue;
            }
            let cell = cv as usize * w + cu as usize;
            if z < zbuf[cell] {
                zbuf[cell] = z;
            }
        }
    }
    let covered: Vec<bool> = zbuf.iter().map(|z| z.is_finite()).collect();
    let out = zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect();
    Ok((TensorGrid::f64_unchecked(vec![h, w], out), ValidityMask::from_bits(h, w, covered)?))
}

/// Alternative depth warp: for each target pixel, follow the backward flow to
/// the source, bilinearly sample the source depth there and carry it through
/// the rigid transform.
pub fn reproject_depth_along_flow(
    depth: &TensorGrid,
    k_src: &Intrinsics,
    t: &RelativeTransform,
    backward_flow: &TensorGrid,
) -> Result<(TensorGrid, ValidityMask)> {
    let (h, w, d) = depth_plane(depth)?;
    if backward_flow.dims() != [h, w, 2] {
        return Err(GridError::Shape(format!("flow {:?} vs depth {h}x{w}", backward_flow.dims())).into());
    }
    let flow = backward_flow.float_values()?;
    let mut out = vec![0.0; h * w];
    let mut covered = vec![false; h * w];
    let mut sample = [0.0];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow[2 * i];
            let sy = y as f64 + flow[2 * i + 1];
            if !sample_into(&d, h, w, 1, sx, sy, &mut sample) {
                continue;
            }
            // the four taps must all carry valid depth
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            if [d[y0 * w + x0], d[y0 * w + x1], d[y1 * w + x0], d[y1 * w + x1]].iter().any(|&v| !(v > 0.0)) {
                continue;
            }
            let p = Vector3::new(sample[0] * (sx - k_src.cx) / k_src.fx, sample[0] * (sy - k_src.cy) / k_src.fy, sample[0]);
            let q = t.apply(&p);
            if q.z > Z_MIN {
                out[i] = q.z;
                covered[i] = true;
            }
        }
    }
    Ok((TensorGrid::f64_unchecked(vec![h, w], out), ValidityMask::from_bits(h, w, covered)?))
}
