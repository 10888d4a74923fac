//! Analytic scene oracle.
//!
//! Scenes are a few textured planes seen by a pinhole camera moving along a
//! path of world-to-camera poses, optionally with a textured quad that
//! translates rigidly from frame to frame. Every pixel is rendered by casting
//! its ray against the geometry, so depth and flow are exact.

mod perturb;
mod texture;

pub use perturb::{decode_latent, inject_perturbation, latent_amplitudes, DecodedLatent, PerturbTarget, PerturbationSpec, WobbleField, LATENT_DIM};
pub use texture::ValueNoise;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::VideoBundle;
use crate::camera::{CameraError, Intrinsics, PoseSE3, Z_MIN};
use crate::grid::{GridError, TensorGrid, ValidityMask};
use crate::reward::{PairInputs, VideoInputs};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("invalid perturbation: {0}")]
    Perturbation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

pub const MIN_RESOLUTION: usize = 32;

const SURF_MAIN: u8 = 0;
const SURF_FAR: u8 = 1;
const SURF_WALL: u8 = 2;
const SURF_OBJECT: u8 = 3;

/// Static background geometry, in world coordinates (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// The plane `Z = depth`.
    FrontoParallel { depth: f64 },
    /// The plane through `(0, 0, depth)` with the given normal.
    Inclined { depth: f64, normal: [f64; 3] },
    /// A step: `Z = near` for `X < split_x`, `Z = far` beyond, joined by the
    /// wall `X = split_x`.
    Relief {
        near: f64,
        far: f64,
        #[serde(default)]
        split_x: f64,
    },
}

/// Fronto-parallel textured rectangle translating by `velocity` per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingObject {
    /// World position of the quad center at frame 0.
    pub center: [f64; 3],
    /// Half extents along world X and Y.
    pub half_size: [f64; 2],
    #[serde(default)]
    pub velocity: [f64; 3],
    pub texture_seed: u64,
}

impl MovingObject {
    fn center_at(&self, frame: usize) -> Vector3<f64> {
        Vector3::from(self.center) + frame as f64 * Vector3::from(self.velocity)
    }
}

fn default_texture_cell() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub intrinsics: Intrinsics,
    pub geometry: Geometry,
    pub texture_seed: u64,
    /// Lattice spacing of the coarsest noise octave, in meters.
    #[serde(default = "default_texture_cell")]
    pub texture_cell: f64,
    pub camera_path: Vec<PoseSE3>,
    #[serde(default)]
    pub moving_object: Option<MovingObject>,
}

/// Appearance modifiers applied while rendering one frame.
#[derive(Clone, Debug)]
pub(crate) struct Look {
    pub wobble: Option<WobbleField>,
    pub drift_px: f64,
    pub object_scale: f64,
}

impl Default for Look {
    fn default() -> Self {
        Look { wobble: None, drift_px: 0.0, object_scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    lambda: f64,
    surface: u8,
    point: Vector3<f64>,
}

struct Cam {
    r_t: Matrix3<f64>,
    center: Vector3<f64>,
    pose: PoseSE3,
    k: Intrinsics,
}

impl Cam {
    /// World ray direction scaled so that the hit parameter equals camera depth.
    #[inline]
    fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.r_t * Vector3::new((u - self.k.cx) / self.k.fx, (v - self.k.cy) / self.k.fy, 1.0)
    }
}

#[inline]
fn plane_z(z0: f64, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    if d.z.abs() < 1e-15 {
        return None;
    }
    let l = (z0 - c.z) / d.z;
    (l > 0.0).then_some(l)
}

fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let e1 = helper.cross(n).normalize();
    (e1, n.cross(&e1))
}

/// Renderer state derived once from a validated spec.
pub(crate) struct Scene<'a> {
    spec: &'a SceneSpec,
    background: ValueNoise,
    object_tex: Option<ValueNoise>,
    normal: Vector3<f64>,
    basis: (Vector3<f64>, Vector3<f64>),
}

impl<'a> Scene<'a> {
    pub(crate) fn new(spec: &'a SceneSpec) -> Result<Self> {
        spec.check_fields()?;
        let normal = match spec.geometry {
            Geometry::Inclined { normal, .. } => Vector3::from(normal).normalize(),
            _ => Vector3::z(),
        };
        Ok(Scene {
            spec,
            background: ValueNoise::new(spec.texture_seed, spec.texture_cell),
            object_tex: spec.moving_object.as_ref().map(|o| ValueNoise::new(o.texture_seed, 0.08)),
            normal,
            basis: tangent_basis(&normal),
        })
    }

    fn cam(&self, frame: usize) -> Cam {
        let pose = self.spec.camera_path[frame];
        Cam { r_t: pose.rotation().transpose(), center: pose.center(), pose, k: self.spec.intrinsics }
    }

    fn cast_background(&self, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, u8)> {
        match self.spec.geometry {
            Geometry::FrontoParallel { depth } => plane_z(depth, c, d).map(|l| (l, SURF_MAIN)),
            Geometry::Inclined { depth, .. } => {
                let denom = self.normal.dot(d);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let l = self.normal.dot(&(Vector3::new(0.0, 0.0, depth) - c)) / denom;
                (l > 0.0).then_some((l, SURF_MAIN))
            }
            Geometry::Relief { near, far, split_x } => {
                let mut best: Option<(f64, u8)> = None;
                let mut offer = |l: f64, s: u8| {
                    if best.is_none_or(|(b, _)| l < b) {
                        best = Some((l, s));
                    }
                };
                if let Some(l) = plane_z(near, c, d) {
                    if c.x + l * d.x < split_x {
                        offer(l, SURF_MAIN);
                    }
                }
                if let Some(l) = plane_z(far, c, d) {
                    if c.x + l * d.x >= split_x {
                        offer(l, SURF_FAR);
                    }
                }
                if d.x.abs() > 1e-15 {
                    let l = (split_x - c.x) / d.x;
                    let z = c.z + l * d.z;
                    if l > 0.0 && z >= near && z <= far {
                        offer(l, SURF_WALL);
                    }
                }
                best
            }
        }
    }

    fn cast(&self, cam: &Cam, frame: usize, u: f64, v: f64, object_scale: f64) -> Option<Hit> {
        let d = cam.ray(u, v);
        let c = &cam.center;
        let (mut lambda, mut surface) = self.cast_background(c, &d)?;
        if let Some(obj) = &self.spec.moving_object {
            let oc = obj.center_at(frame);
            if let Some(l) = plane_z(oc.z, c, &d) {
                let p = c + l * d;
                let (hx, hy) = (obj.half_size[0] * object_scale, obj.half_size[1] * object_scale);
                if l < lambda && (p.x - oc.x).abs() <= hx && (p.y - oc.y).abs() <= hy {
                    lambda = l;
                    surface = SURF_OBJECT;
                }
            }
        }
        Some(Hit { lambda, surface, point: c + lambda * d })
    }

    fn shade(&self, hit: &Hit, frame: usize, look: &Look) -> [f64; 3] {
        let p = &hit.point;
        if hit.surface == SURF_OBJECT {
            let obj = self.spec.moving_object.as_ref().expect("object hit without object");
            let oc = obj.center_at(frame);
            let s = look.object_scale;
            return self.object_tex.as_ref().unwrap().rgb((p.x - oc.x) / s, (p.y - oc.y) / s);
        }
        let (mut a, b) = match (&self.spec.geometry, hit.surface) {
            (Geometry::Inclined { depth, .. }, _) => {
                let q = p - Vector3::new(0.0, 0.0, *depth);
                (q.dot(&self.basis.0), q.dot(&self.basis.1))
            }
            (_, SURF_FAR) => (p.x + 100.0, p.y),
            (_, SURF_WALL) => (p.z + 200.0, p.y),
            _ => (p.x, p.y),
        };
        // a slide of `drift_px` image pixels at this depth
        a -= look.drift_px * hit.lambda / self.spec.intrinsics.fx;
        self.background.rgb(a, b)
    }

    /// Renders frame `frame` under `look`: image (H x W x 3 in [0, 1]), z-depth, surface ids.
    pub(crate) fn render(&self, frame: usize, look: &Look) -> Result<(Vec<f64>, Vec<f64>, Vec<u8>)> {
        let (h, w) = (self.spec.height, self.spec.width);
        let cam = self.cam(frame);
        let mut image = vec![0.0; h * w * 3];
        let mut depth = vec![0.0; h * w];
        let mut surf = vec![0u8; h * w];
        let missed = image
            .par_chunks_mut(3 * w)
            .zip(depth.par_chunks_mut(w))
            .zip(surf.par_chunks_mut(w))
            .enumerate()
            .map(|(y, ((irow, drow), srow))| {
                for x in 0..w {
                    let (mut u, mut v) = (x as f64, y as f64);
                    if let Some(wf) = &look.wobble {
                        let (dx, dy) = wf.displacement(u, v);
                        u += dx;
                        v += dy;
                    }
                    let Some(hit) = self.cast(&cam, frame, u, v, look.object_scale) else {
                        return Some((x, y));
                    };
                    irow[3 * x..3 * x + 3].copy_from_slice(&self.shade(&hit, frame, look));
                    drow[x] = hit.lambda;
                    srow[x] = hit.surface;
                }
                None
            })
            .find_first(|m| m.is_some())
            .flatten();
        if let Some((x, y)) = missed {
            return Err(SynthError::Spec(format!("ray through pixel ({x}, {y}) of frame {frame} misses the scene")));
        }
        Ok((image, depth, surf))
    }

    /// Exact correspondence displacement from frame `a` to frame `b`, with the
    /// mask of pixels whose surface point is still visible in `b`.
    pub(crate) fn flow(&self, a: usize, b: usize) -> (Vec<f64>, Vec<bool>) {
        let (h, w) = (self.spec.height, self.spec.width);
        let (cam_a, cam_b) = (self.cam(a), self.cam(b));
        let shift = self.spec.moving_object.as_ref().map(|o| o.center_at(b) - o.center_at(a));
        let same_pose = cam_a.pose == cam_b.pose;
        let mut flow = vec![0.0; h * w * 2];
        let mut visible = vec![false; h * w];
        flow.par_chunks_mut(2 * w).zip(visible.par_chunks_mut(w)).enumerate().for_each(|(y, (frow, vrow))| {
            for x in 0..w {
                let Some(hit) = self.cast(&cam_a, a, x as f64, y as f64, 1.0) else { continue };
                let moved = hit.surface == SURF_OBJECT && shift.is_some_and(|s| s != Vector3::zeros());
                if same_pose && !moved {
                    // exact zero, free of unproject/project round-off
                    vrow[x] = true;
                    continue;
                }
                let mut p = hit.point;
                if moved {
                    p += shift.unwrap();
                }
                let q = cam_b.pose.transform_point(&p);
                if !(q.z > Z_MIN) {
                    continue;
                }
                let (u, v) = cam_b.k.project(&q);
                frow[2 * x] = u - x as f64;
                frow[2 * x + 1] = v - y as f64;
                if u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64 {
                    if let Some(hb) = self.cast(&cam_b, b, u, v, 1.0) {
                        let same_kind = (hb.surface == SURF_OBJECT) == (hit.surface == SURF_OBJECT);
                        vrow[x] = same_kind && (hb.lambda - q.z).abs() <= 1e-6 * q.z.max(1.0);
                    }
                }
            }
        });
        (flow, visible)
    }
}

impl SceneSpec {
    fn check_fields(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.height < MIN_RESOLUTION || self.width < MIN_RESOLUTION {
            return bad(format!("resolution {}x{} below {MIN_RESOLUTION}x{MIN_RESOLUTION}", self.height, self.width));
        }
        if self.camera_path.is_empty() {
            return bad("camera_path is empty".into());
        }
        if !(self.texture_cell > 0.0 && self.texture_cell.is_finite()) {
            return bad(format!("texture_cell must be positive, got {}", self.texture_cell));
        }
        match self.geometry {
            Geometry::FrontoParallel { depth } if !(depth.is_finite()) => return bad("plane depth must be finite".into()),
            Geometry::Inclined { depth, normal } => {
                let n = Vector3::from(normal);
                if !depth.is_finite() || !(n.norm() > 1e-9) || !n.iter().all(|v| v.is_finite()) {
                    return bad("inclined plane needs a finite depth and a nonzero normal".into());
                }
            }
            Geometry::Relief { near, far, split_x } if !(near > 0.0 && far > near && split_x.is_finite() && far.is_finite()) => {
                return bad(format!("relief needs 0 < near < far, got near={near}, far={far}"));
            }
            _ => {}
        }
        if let Some(o) = &self.moving_object {
            let finite = o.center.iter().chain(&o.velocity).all(|v| v.is_finite());
            if !finite || !(o.half_size[0] > 0.0 && o.half_size[1] > 0.0) {
                return bad("moving object needs finite motion and positive half sizes".into());
            }
        }
        Ok(())
    }

    /// Full validation: field ranges, and every camera ray must hit the
    /// background in front of the camera.
    pub fn validate(&self) -> Result<()> {
        let scene = Scene::new(self)?;
        for frame in 0..self.camera_path.len() {
            let cam = scene.cam(frame);
            if let Geometry::Relief { near, split_x, .. } = self.geometry {
                if cam.center.z >= near && cam.center.x < split_x {
                    return Err(SynthError::Spec(format!("camera {frame} is inside the relief geometry")));
                }
            }
            for y in 0..self.height {
                for x in 0..self.width {
                    let d = cam.ray(x as f64, y as f64);
                    match scene.cast_background(&cam.center, &d) {
                        Some((l, _)) if l > Z_MIN => {}
                        _ => {
                            return Err(SynthError::Spec(format!(
                                "camera {frame} is inside or behind the geometry (pixel ({x}, {y}) has no positive depth)"
                            )))
                        }
                    }
                }
            }
            if let Some(o) = &self.moving_object {
                let z = cam.pose.transform_point(&o.center_at(frame)).z;
                if !(z > Z_MIN) {
                    return Err(SynthError::Spec(format!("moving object is behind camera {frame}")));
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.camera_path.len()
    }

    /// Copy with a two-frame path: the template's first pose, then the same
    /// camera moved by `tx` meters along world X.
    pub fn with_camera_shift(&self, tx: f64) -> SceneSpec {
        let e0 = self.camera_path[0];
        let e1 = PoseSE3::new(*e0.rotation(), e0.translation() - e0.rotation() * Vector3::new(tx, 0.0, 0.0))
            .expect("rotation taken from a valid pose");
        SceneSpec { camera_path: vec![e0, e1], ..self.clone() }
    }

    fn square(size: usize, f: f64) -> Intrinsics {
        let c = (size as f64 - 1.0) / 2.0;
        Intrinsics::new(f, f, c, c).expect("positive focal length")
    }

    /// 48x48 plane at 2 m; the second camera is offset so the flow is exactly 2 px.
    pub fn fronto_parallel_template(seed: u64) -> SceneSpec {
        SceneSpec {
            height: 48,
            width: 48,
            intrinsics: Self::square(48, 48.0),
            geometry: Geometry::FrontoParallel { depth: 2.0 },
            texture_seed: seed,
            texture_cell: 0.25,
            camera_path: vec![PoseSE3::identity(), PoseSE3::from_translation(Vector3::new(2.0 * 2.0 / 48.0, 0.0, 0.0))],
            moving_object: None,
        }
    }

    /// 48x48 plane tilted about the vertical axis, static camera.
    pub fn inclined_template(seed: u64) -> SceneSpec {
        SceneSpec {
            geometry: Geometry::Inclined { depth: 2.2, normal: [0.35, 0.1, 1.0] },
            camera_path: vec![PoseSE3::identity(), PoseSE3::identity()],
            ..Self::fronto_parallel_template(seed)
        }
    }

    /// 48x48 two-plane step, static camera.
    pub fn relief_template(seed: u64) -> SceneSpec {
        SceneSpec {
            geometry: Geometry::Relief { near: 1.8, far: 2.6, split_x: 0.05 },
            camera_path: vec![PoseSE3::identity(), PoseSE3::identity()],
            ..Self::fronto_parallel_template(seed)
        }
    }

    /// Scene the latent decoder perturbs: a plane with a slowly moving quad in front.
    pub fn latent_template(seed: u64) -> SceneSpec {
        SceneSpec {
            geometry: Geometry::FrontoParallel { depth: 2.5 },
            camera_path: vec![PoseSE3::identity(), PoseSE3::identity()],
            moving_object: Some(MovingObject {
                center: [0.05, -0.05, 1.5],
                half_size: [0.3, 0.3],
                velocity: [0.0, 0.0, 0.0],
                texture_seed: seed.wrapping_add(0x5eed),
            }),
            ..Self::fronto_parallel_template(seed)
        }
    }
}

/// Everything the reward consumes for one frame pair, plus oracle extras.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub scene: SceneSpec,
    pub frame_a: usize,
    pub frame_b: usize,
    pub image_a: TensorGrid,
    pub image_b: TensorGrid,
    pub depth_a: TensorGrid,
    pub depth_b: TensorGrid,
    pub flow_fwd: TensorGrid,
    pub flow_bwd: TensorGrid,
    pub intrinsics: Intrinsics,
    pub pose_a: PoseSE3,
    pub pose_b: PoseSE3,
    /// Predictor confidence, identically one.
    pub confidence: TensorGrid,
    pub object_mask_a: ValidityMask,
    pub object_mask_b: ValidityMask,
    /// Pixels of `a` whose surface point is visible in `b` (and vice versa).
    pub visible_fwd: ValidityMask,
    pub visible_bwd: ValidityMask,
}

impl RenderedPair {
    pub fn inputs(&self) -> PairInputs<'_> {
        PairInputs {
            frame_a: &self.image_a,
            frame_b: &self.image_b,
            depth_a: &self.depth_a,
            depth_b: &self.depth_b,
            k_a: &self.intrinsics,
            k_b: &self.intrinsics,
            e_a: &self.pose_a,
            e_b: &self.pose_b,
            flow_fwd: &self.flow_fwd,
            flow_bwd: &self.flow_bwd,
            confidence_a: Some(&self.confidence),
            confidence_b: Some(&self.confidence),
        }
    }
}

fn object_mask(h: usize, w: usize, surf: &[u8]) -> ValidityMask {
    ValidityMask::from_bits(h, w, surf.iter().map(|&s| s == SURF_OBJECT).collect()).expect("sized from the render")
}

/// Renders frames `tau` and `tau + 1` of the spec's camera path.
pub fn render_pair(spec: &SceneSpec, tau: usize) -> Result<RenderedPair> {
    render_pair_between(spec, tau, tau + 1)
}

/// Renders frames `a` and `b` with exact depth and flows in both directions.
pub fn render_pair_between(spec: &SceneSpec, a: usize, b: usize) -> Result<RenderedPair> {
    spec.validate()?;
    let n = spec.frames();
    if a >= n || b >= n {
        return Err(SynthError::Spec(format!("frames ({a}, {b}) outside a {n}-frame camera path")));
    }
    let scene = Scene::new(spec)?;
    let (h, w) = (spec.height, spec.width);
    let look = Look::default();
    let (img_a, dep_a, surf_a) = scene.render(a, &look)?;
    let (img_b, dep_b, surf_b) = scene.render(b, &look)?;
    let (fwd, vis_f) = scene.flow(a, b);
    let (bwd, vis_b) = scene.flow(b, a);
    let grid = |dims: Vec<usize>, v: Vec<f64>| TensorGrid::from_f64(dims, v);
    Ok(RenderedPair {
        scene: spec.clone(),
        frame_a: a,
        frame_b: b,
        image_a: grid(vec![h, w, 3], img_a)?,
        image_b: grid(vec![h, w, 3], img_b)?,
        depth_a: grid(vec![h, w], dep_a)?,
        depth_b: grid(vec![h, w], dep_b)?,
        flow_fwd: grid(vec![h, w, 2], fwd)?,
        flow_bwd: grid(vec![h, w, 2], bwd)?,
        intrinsics: spec.intrinsics,
        pose_a: spec.camera_path[a],
        pose_b: spec.camera_path[b],
        confidence: TensorGrid::filled(vec![h, w], 1.0)?,
        object_mask_a: object_mask(h, w, &surf_a),
        object_mask_b: object_mask(h, w, &surf_b),
        visible_fwd: ValidityMask::from_bits(h, w, vis_f)?,
        visible_bwd: ValidityMask::from_bits(h, w, vis_b)?,
    })
}

/// Flow strides emitted for a synthesized video: 1, plus 4 when the path is long enough.
pub fn video_strides(frames: usize) -> Vec<usize> {
    let mut s = vec![1];
    if frames > 4 {
        s.push(4);
    }
    s
}

/// Renders every frame of the camera path in the adapter layout.
///
/// Frame 0 is clean. Frame `tau` gets a wobble with its own seed, a texture
/// slide of `tau * texture_drift_px` and the object scaled by
/// `(1 + object_morph)^tau`, so pairs at stride `s` see roughly `s` times the
/// per-frame inconsistency. Flows stay clean unless the perturbation targets
/// them; depth noise is drawn independently per frame.
pub fn render_video(spec: &SceneSpec, p: &PerturbationSpec, seed: u64) -> Result<VideoBundle> {
    spec.validate()?;
    p.validate()?;
    let n = spec.frames();
    if n < 2 {
        return Err(SynthError::Spec("a video needs at least two camera poses".into()));
    }
    let scene = Scene::new(spec)?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut looks = Vec::with_capacity(n);
    for tau in 0..n {
        let look = perturb::frame_look(p, seed, tau, h, w);
        let clean = Look::default();
        let (_, dep, surf) = scene.render(tau, &clean)?;
        let (img, _, _) = scene.render(tau, if p.target == PerturbTarget::Appearance { &look } else { &clean })?;
        frames.push(TensorGrid::from_f64(vec![h, w, 3], img)?);
        let dep = perturb::noisy_depth(dep, p.depth_noise_rel, seed, tau);
        depth.push(TensorGrid::from_f64(vec![h, w], dep)?);
        masks.push(ValidityMask::from_bits(h, w, surf.iter().map(|&s| s != SURF_OBJECT).collect())?);
        looks.push(look);
    }
    let mut flows = BTreeMap::new();
    for stride in video_strides(n) {
        for a in 0..n - stride {
            let b = a + stride;
            let (mut fwd, _) = scene.flow(a, b);
            let (mut bwd, _) = scene.flow(b, a);
            if p.target == PerturbTarget::Flow {
                let drift = looks[b].drift_px - looks[a].drift_px;
                perturb::corrupt_flow(&mut fwd, &mut bwd, looks[b].wobble.as_ref(), drift, &masks[a], &masks[b]);
            }
            flows.insert((a, b), (TensorGrid::from_f64(vec![h, w, 2], fwd)?, TensorGrid::from_f64(vec![h, w, 2], bwd)?));
        }
    }
    let confidence = (0..n).map(|_| TensorGrid::filled(vec![h, w], 1.0)).collect::<Result<Vec<_>, _>>()?;
    Ok(VideoBundle {
        video: VideoInputs {
            frames,
            depth,
            intrinsics: vec![spec.intrinsics; n],
            extrinsics: spec.camera_path.clone(),
            confidence: Some(confidence),
            features: None,
            flows,
        },
        static_masks: spec.moving_object.as_ref().map(|_| masks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{relative_transform, rigid_flow, reproject_depth};
    use crate::grid::bilinear_sample;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 31.5, 31.5).unwrap()
    }

    fn plane_spec(path: Vec<PoseSE3>) -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            intrinsics: k100(),
            geometry: Geometry::FrontoParallel { depth: 2.0 },
            texture_seed: 5,
            texture_cell: 0.1,
            camera_path: path,
            moving_object: None,
        }
    }

    #[test]
    fn static_camera_is_frozen() {
        let p = render_pair(&plane_spec(vec![PoseSE3::identity(); 2]), 0).unwrap();
        assert_eq!(p.image_a, p.image_b);
        assert!(p.flow_fwd.to_f64_vec().iter().all(|&f| f == 0.0));
        assert!(p.flow_bwd.to_f64_vec().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn translating_camera_gives_five_pixels() {
        let spec = plane_spec(vec![PoseSE3::identity(), PoseSE3::from_translation(Vector3::new(0.1, 0.0, 0.0))]);
        let p = render_pair(&spec, 0).unwrap();
        for f in p.flow_fwd.to_f64_vec().chunks(2) {
            assert!((f[0] - 5.0).abs() < 1e-6 && f[1].abs() < 1e-6);
        }
        assert!(p.depth_a.to_f64_vec().iter().all(|&d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn object_translation_flow() {
        // object at 1 m, 0.02 m per frame, fx = 100 -> 2 px per frame
        let mut spec = plane_spec(vec![PoseSE3::identity(); 2]);
        spec.moving_object =
            Some(MovingObject { center: [0.0, 0.0, 1.0], half_size: [0.08, 0.08], velocity: [0.02, 0.0, 0.0], texture_seed: 9 });
        let p = render_pair(&spec, 0).unwrap();
        let flow = p.flow_fwd.to_f64_vec();
        let mut inside = 0;
        for i in 0..64 * 64 {
            let (fx, fy) = (flow[2 * i], flow[2 * i + 1]);
            if p.object_mask_a.bits()[i] {
                inside += 1;
                assert!((fx - 2.0).abs() < 1e-9 && fy.abs() < 1e-9);
            } else {
                assert_eq!((fx, fy), (0.0, 0.0));
            }
        }
        assert!(inside > 200);
    }

    fn oracle_scenes() -> Vec<SceneSpec> {
        let moving = vec![
            PoseSE3::identity(),
            PoseSE3::from_axis_angle(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.07, -0.03, 0.05)),
        ];
        let mut v = vec![
            SceneSpec::fronto_parallel_template(1),
            SceneSpec::inclined_template(2),
            SceneSpec::relief_template(3),
            SceneSpec::latent_template(4).with_camera_shift(0.1),
        ];
        for s in v.clone() {
            v.push(SceneSpec { camera_path: moving.clone(), ..s });
        }
        v
    }

    #[test]
    fn oracle_matches_rigid_flow_on_background() {
        for spec in oracle_scenes() {
            let p = render_pair(&spec, 0).unwrap();
            let t = relative_transform(&p.pose_a, &p.pose_b);
            let (rig, valid) = rigid_flow(&p.depth_a, &p.intrinsics, &p.intrinsics, &t).unwrap();
            let (rig, gt) = (rig.to_f64_vec(), p.flow_fwd.to_f64_vec());
            for i in 0..spec.height * spec.width {
                if !p.object_mask_a.bits()[i] {
                    assert!(valid.bits()[i]);
                    assert!((rig[2 * i] - gt[2 * i]).abs() < 1e-6);
                    assert!((rig[2 * i + 1] - gt[2 * i + 1]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn forward_backward_flows_are_inverse() {
        // translation-only cameras keep 1/z affine in the pixel coordinates,
        // so bilinear lookups of the backward flow are exact within a surface
        let path = vec![PoseSE3::identity(), PoseSE3::from_translation(Vector3::new(0.06, 0.02, 0.0))];
        for spec in oracle_scenes().into_iter().take(4) {
            let spec = SceneSpec { camera_path: path.clone(), ..spec };
            let p = render_pair(&spec, 0).unwrap();
            let scene = Scene::new(&spec).unwrap();
            let (_, _, surf_b) = scene.render(1, &Look::default()).unwrap();
            let (_, _, surf_a) = scene.render(0, &Look::default()).unwrap();
            let (h, w) = (spec.height, spec.width);
            let fwd = p.flow_fwd.to_f64_vec();
            let mut checked = 0;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !p.visible_fwd.bits()[i] {
                        continue;
                    }
                    let (u, v) = (x as f64 + fwd[2 * i], y as f64 + fwd[2 * i + 1]);
                    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let taps = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
                    if taps.iter().any(|&j| surf_b[j] != surf_a[i] || !p.visible_bwd.bits()[j]) {
                        continue;
                    }
                    let (b, inside) = bilinear_sample(&p.flow_bwd, u, v).unwrap();
                    assert!(inside);
                    assert!((b[0] + fwd[2 * i]).abs() < 1e-4 && (b[1] + fwd[2 * i + 1]).abs() < 1e-4, "({x},{y})");
                    checked += 1;
                }
            }
            assert!(checked > h * w / 2);
        }
    }

    #[test]
    fn depth_reprojection_on_fronto_parallel_scenes() {
        for t in [Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.04, 0.0), Vector3::zeros()] {
            let spec = plane_spec(vec![PoseSE3::identity(), PoseSE3::from_translation(t)]);
            let p = render_pair(&spec, 0).unwrap();
            let rel = relative_transform(&p.pose_a, &p.pose_b);
            let (warped, covered) = reproject_depth(&p.depth_a, &p.intrinsics, &p.intrinsics, &rel).unwrap();
            for i in 0..64 * 64 {
                if covered.bits()[i] {
                    assert!((warped.get(i) - p.depth_b.get(i)).abs() <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn relief_marks_occlusions() {
        let spec = SceneSpec {
            camera_path: vec![PoseSE3::identity(), PoseSE3::from_translation(Vector3::new(0.15, 0.0, 0.0))],
            ..SceneSpec::relief_template(1)
        };
        let p = render_pair(&spec, 0).unwrap();
        let hidden = p.visible_fwd.bits().iter().filter(|&&v| !v).count();
        assert!(hidden > 0 && hidden < 48 * 48 / 2);
    }

    #[test]
    fn invalid_specs() {
        let mut s = SceneSpec::fronto_parallel_template(0);
        s.height = 16;
        assert!(matches!(s.validate(), Err(SynthError::Spec(_))));
        let s = SceneSpec { geometry: Geometry::FrontoParallel { depth: -1.0 }, ..SceneSpec::fronto_parallel_template(0) };
        assert!(matches!(s.validate(), Err(SynthError::Spec(_))));
        let s = SceneSpec {
            camera_path: vec![PoseSE3::from_translation(Vector3::new(0.0, 0.0, -2.5))],
            ..SceneSpec::relief_template(0)
        };
        assert!(matches!(s.validate(), Err(SynthError::Spec(_))), "camera behind the near plane");
        let s = SceneSpec { geometry: Geometry::Relief { near: 2.0, far: 1.0, split_x: 0.0 }, ..SceneSpec::relief_template(0) };
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = SceneSpec::latent_template(3).with_camera_shift(0.05);
        let json = serde_json::to_string(&s).unwrap();
        let back: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let err = serde_json::from_str::<SceneSpec>("{\"height\": 48, \"width\": }").unwrap_err();
        assert_eq!(err.line(), 1);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let spec = SceneSpec::relief_template(7).with_camera_shift(0.08);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = one.install(|| render_pair(&spec, 0).unwrap());
        let b = many.install(|| render_pair(&spec, 0).unwrap());
        assert_eq!(a, b);
    }
}
