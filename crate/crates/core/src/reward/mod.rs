//! Geometry-consistency reward for a frame pair and its video aggregate.
//!
//! The structural term compares observed flow with the flow a rigid scene
//! would produce under the camera motion, and the reprojected source depth
//! with the target depth. The semantic term compares patch features of the
//! flow-warped source frame with those of the target frame. Both are blended
//! into a single pair reward; a video reward is the mean over its pairs.

mod features;

pub use features::{patch_mask, patch_mean, reference_features, FEATURE_CHANNELS};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, CameraError, Intrinsics, PoseSE3};
use crate::grid::{backward_warp, sample_into, GridError, TensorGrid, ValidityMask};

/// Value stored in the depth-error map at reprojection holes.
pub const DEPTH_HOLE: f64 = -1.0;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("empty mask: no valid {0}")]
    EmptyMask(&'static str),
    #[error("non-finite value produced by {stage}")]
    NonFinite { stage: &'static str },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

pub type Result<T, E = RewardError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Gating {
    Off,
    /// Pixels (and patches) with confidence below the threshold leave the valid set.
    Threshold { threshold: f64 },
    /// Every valid pixel is weighted by its confidence.
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthWarp {
    /// Forward splat with a z-buffer through the rigid transform.
    ForwardSplat,
    /// Bilinear lookup of the source depth along the backward flow.
    FlowSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda: f64,
    pub eps_num: f64,
    pub pair_stride: usize,
    pub gating: Gating,
    pub feature_patch: usize,
    pub depth_warp: DepthWarp,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda: 0.5,
            eps_num: 1.5,
            pair_stride: 1,
            gating: Gating::Weighted,
            feature_patch: 8,
            depth_warp: DepthWarp::ForwardSplat,
        }
    }
}

impl RewardConfig {
    /// Evaluation defaults: frame pairs four frames apart.
    pub fn evaluation() -> Self {
        RewardConfig { pair_stride: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RewardError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.eps_num > 0.0 && self.eps_num.is_finite()) {
            return Err(RewardError::Config(format!("eps_num must be positive, got {}", self.eps_num)));
        }
        if self.pair_stride == 0 {
            return Err(RewardError::Config("pair_stride must be at least 1".into()));
        }
        if self.feature_patch == 0 {
            return Err(RewardError::Config("feature_patch must be at least 1".into()));
        }
        if let Gating::Threshold { threshold } = self.gating {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(RewardError::Config(format!("gating threshold {threshold} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

fn single_channel(grid: &TensorGrid, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = grid.hwc()?;
    if c != 1 {
        return Err(RewardError::Shape(format!("{what} must be H x W, got {:?}", grid.dims())));
    }
    Ok((h, w, grid.float_values()?))
}

fn flow_field(grid: &TensorGrid, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = grid.hwc()?;
    if c != 2 || grid.dims().len() != 3 {
        return Err(RewardError::Shape(format!("{what} must be H x W x 2, got {:?}", grid.dims())));
    }
    Ok((h, w, grid.float_values()?))
}

fn ensure_finite(values: &[f64], stage: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RewardError::NonFinite { stage })
    }
}

/// Per-pixel `|F_pred - F_rig| / (|F_pred| + |F_rig| + eps)`.
///
/// Always non-negative; values above one are possible and are clamped later
/// by [`geo_quality`].
pub fn normalized_epe(f_pred: &TensorGrid, f_rig: &TensorGrid, eps: f64) -> Result<TensorGrid> {
    let (h, w, a) = flow_field(f_pred, "predicted flow")?;
    let (h2, w2, b) = flow_field(f_rig, "rigid flow")?;
    if (h, w) != (h2, w2) {
        return Err(RewardError::Shape(format!("flow dims {h}x{w} vs {h2}x{w2}")));
    }
    if !(eps > 0.0) {
        return Err(RewardError::Config(format!("eps must be positive, got {eps}")));
    }
    let out: Vec<f64> = a
        .chunks_exact(2)
        .zip(b.chunks_exact(2))
        .map(|(p, r)| {
            let num = (p[0] - r[0]).hypot(p[1] - r[1]);
            num / (p[0].hypot(p[1]) + r[0].hypot(r[1]) + eps)
        })
        .collect();
    ensure_finite(&out, "normalized_epe")?;
    Ok(TensorGrid::f64_unchecked(vec![h, w], out))
}

/// Per-pixel `|D_warp - D_next| / (D_next + eps)`; holes carry [`DEPTH_HOLE`].
pub fn relative_depth_error(d_warp: &TensorGrid, d_next: &TensorGrid, eps: f64, covered: &ValidityMask) -> Result<TensorGrid> {
    let (h, w, a) = single_channel(d_warp, "warped depth")?;
    let (h2, w2, b) = single_channel(d_next, "target depth")?;
    if (h, w) != (h2, w2) || covered.height() != h || covered.width() != w {
        return Err(RewardError::Shape(format!("depth dims {h}x{w} vs {h2}x{w2}")));
    }
    if !(eps > 0.0) {
        return Err(RewardError::Config(format!("eps must be positive, got {eps}")));
    }
    let out: Vec<f64> = a
        .iter()
        .zip(&b)
        .zip(covered.bits())
        .map(|((&dw, &dn), &ok)| if ok { (dw - dn).abs() / (dn + eps) } else { DEPTH_HOLE })
        .collect();
    ensure_finite(&out, "relative_depth_error")?;
    Ok(TensorGrid::f64_unchecked(vec![h, w], out))
}

/// Per-pixel `(1 - min(epe, 1)) * (1 - min(depth_err, 1))`, in `[0, 1]`.
/// Hole pixels (negative depth error) score zero.
pub fn geo_quality(epe: &TensorGrid, depth_err: &TensorGrid) -> Result<TensorGrid> {
    if epe.dims() != depth_err.dims() {
        return Err(RewardError::Shape(format!("{:?} vs {:?}", epe.dims(), depth_err.dims())));
    }
    let out = epe
        .to_f64_vec()
        .iter()
        .zip(depth_err.to_f64_vec())
        .map(|(&e, d)| if d < 0.0 { 0.0 } else { (1.0 - e.min(1.0)) * (1.0 - d.min(1.0)) })
        .collect();
    Ok(TensorGrid::f64_unchecked(epe.dims().to_vec(), out))
}

/// Pixel weights under the gating policy; zero weight means "not in the valid set".
pub fn gate_weights(omega: &ValidityMask, confidence: Option<&TensorGrid>, gating: Gating) -> Result<Vec<f64>> {
    let conf = match confidence {
        Some(c) => {
            let (h, w, v) = single_channel(c, "confidence")?;
            if h != omega.height() || w != omega.width() {
                return Err(RewardError::Shape(format!("confidence {h}x{w} vs mask {}x{}", omega.height(), omega.width())));
            }
            Some(v)
        }
        None => None,
    };
    Ok(omega
        .bits()
        .iter()
        .enumerate()
        .map(|(i, &ok)| {
            if !ok {
                return 0.0;
            }
            match (gating, &conf) {
                (Gating::Threshold { threshold }, Some(c)) => (c[i] >= threshold) as u8 as f64,
                (Gating::Weighted, Some(c)) => c[i].clamp(0.0, 1.0),
                _ => 1.0,
            }
        })
        .collect())
}

/// Weighted mean of `Q` over the valid set, shifted into `[-1, 0]`.
pub fn r_geo(q: &TensorGrid, omega: &ValidityMask, confidence: Option<&TensorGrid>, gating: Gating) -> Result<f64> {
    let weights = gate_weights(omega, confidence, gating)?;
    if weights.len() != q.len() {
        return Err(RewardError::Shape(format!("Q has {} pixels, mask {}", q.len(), weights.len())));
    }
    weighted_geo(&q.to_f64_vec(), &weights)
}

fn weighted_geo(q: &[f64], weights: &[f64]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (&qv, &wv) in q.iter().zip(weights) {
        if wv > 0.0 {
            num += wv * qv;
            den += wv;
        }
    }
    if den <= 0.0 {
        return Err(RewardError::EmptyMask("pixels for the geometric term"));
    }
    Ok((num / den - 1.0).clamp(-1.0, 0.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Negative weighted mean patch cosine distance, in `[-2, 0]`.
pub fn r_dino(feat_warped: &TensorGrid, feat_target: &TensorGrid, mask: &ValidityMask) -> Result<f64> {
    let weights: Vec<f64> = mask.bits().iter().map(|&b| b as u8 as f64).collect();
    r_dino_weighted(feat_warped, feat_target, &weights)
}

/// [`r_dino`] with real-valued patch weights (zero excludes a patch).
pub fn r_dino_weighted(feat_warped: &TensorGrid, feat_target: &TensorGrid, weights: &[f64]) -> Result<f64> {
    if feat_warped.dims() != feat_target.dims() {
        return Err(RewardError::Shape(format!("feature dims {:?} vs {:?}", feat_warped.dims(), feat_target.dims())));
    }
    let (hp, wp, c) = feat_warped.hwc()?;
    if weights.len() != hp * wp {
        return Err(RewardError::Shape(format!("{} patch weights for a {hp}x{wp} grid", weights.len())));
    }
    let a = feat_warped.float_values()?;
    let b = feat_target.float_values()?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &wv) in weights.iter().enumerate() {
        if wv > 0.0 {
            num += wv * (1.0 - cosine(&a[p * c..(p + 1) * c], &b[p * c..(p + 1) * c]));
            den += wv;
        }
    }
    if den <= 0.0 {
        return Err(RewardError::EmptyMask("patches for the semantic term"));
    }
    Ok((-num / den).clamp(-2.0, 0.0))
}

/// Where the semantic features come from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    /// Compute [`reference_features`] on the warped and target frames.
    Reference,
    /// Use supplied feature grids for the source and target frames; the
    /// source grid is warped at patch resolution along the backward flow.
    Precomputed { source: &'a TensorGrid, target: &'a TensorGrid },
}

/// Everything the reward consumes for one frame pair `(a, b)`.
#[derive(Clone, Copy, Debug)]
pub struct PairInputs<'a> {
    pub frame_a: &'a TensorGrid,
    pub frame_b: &'a TensorGrid,
    pub depth_a: &'a TensorGrid,
    pub depth_b: &'a TensorGrid,
    pub k_a: &'a Intrinsics,
    pub k_b: &'a Intrinsics,
    pub e_a: &'a PoseSE3,
    pub e_b: &'a PoseSE3,
    /// Flow from `a` to `b`, anchored on `a`'s pixel grid.
    pub flow_fwd: &'a TensorGrid,
    /// Flow from `b` to `a`, anchored on `b`'s pixel grid.
    pub flow_bwd: &'a TensorGrid,
    pub confidence_a: Option<&'a TensorGrid>,
    pub confidence_b: Option<&'a TensorGrid>,
}

#[derive(Clone, Debug)]
pub struct PairMaps {
    pub epe: TensorGrid,
    pub depth_err: TensorGrid,
    pub q_geo: TensorGrid,
    /// Valid set of the geometric term, after gating.
    pub omega: ValidityMask,
    /// Per-pixel aggregation weights (zero outside the valid set).
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PairScore {
    pub r_geo: f64,
    pub r_dino: f64,
    pub r_pair: f64,
    pub valid_fraction: f64,
    pub maps: PairMaps,
}

/// `lambda * r_geo + (1 - lambda) * r_dino`.
pub fn blend(lambda: f64, r_geo: f64, r_dino: f64) -> f64 {
    lambda * r_geo + (1.0 - lambda) * r_dino
}

fn check_same_hw(grid: &TensorGrid, h: usize, w: usize, what: &str) -> Result<()> {
    let (gh, gw, _) = grid.hwc()?;
    if (gh, gw) != (h, w) {
        return Err(RewardError::Shape(format!("{what} is {gh}x{gw}, expected {h}x{w}")));
    }
    Ok(())
}

pub fn score_pair(inputs: &PairInputs<'_>, features: FeatureSource<'_>, config: &RewardConfig) -> Result<PairScore> {
    config.validate()?;
    let (h, w, _) = inputs.depth_a.hwc()?;
    for (g, what) in [
        (inputs.frame_a, "frame a"),
        (inputs.frame_b, "frame b"),
        (inputs.depth_b, "depth b"),
        (inputs.flow_fwd, "forward flow"),
        (inputs.flow_bwd, "backward flow"),
    ] {
        check_same_hw(g, h, w, what)?;
    }
    for c in [inputs.confidence_a, inputs.confidence_b].into_iter().flatten() {
        check_same_hw(c, h, w, "confidence")?;
    }

    // structural term
    let t = camera::relative_transform(inputs.e_a, inputs.e_b);
    let (f_rig, rig_valid) = camera::rigid_flow(inputs.depth_a, inputs.k_a, inputs.k_b, &t)?;
    ensure_finite(&f_rig.to_f64_vec(), "rigid_flow")?;
    let epe = normalized_epe(inputs.flow_fwd, &f_rig, config.eps_num)?;
    let (d_warp, covered) = match config.depth_warp {
        DepthWarp::ForwardSplat => camera::reproject_depth(inputs.depth_a, inputs.k_a, inputs.k_b, &t)?,
        DepthWarp::FlowSample => camera::reproject_depth_along_flow(inputs.depth_a, inputs.k_a, &t, inputs.flow_bwd)?,
    };
    ensure_finite(&d_warp.to_f64_vec(), "reproject_depth")?;
    let depth_err = relative_depth_error(&d_warp, inputs.depth_b, config.eps_num, &covered)?;
    let q_geo = geo_quality(&epe, &depth_err)?;

    let depth_b = inputs.depth_b.float_values()?;
    let target_depth_ok: Vec<bool> = depth_b.iter().map(|&d| d > 0.0).collect();
    let omega_base = rig_valid.and(&covered)?.and(&ValidityMask::from_bits(h, w, target_depth_ok)?)?;
    let weights = gate_weights(&omega_base, inputs.confidence_a, config.gating)?;
    let omega = ValidityMask::from_bits(h, w, weights.iter().map(|&v| v > 0.0).collect())?;
    let r_geo = weighted_geo(&q_geo.to_f64_vec(), &weights)?;

    // semantic term
    let (feat_warped, feat_target, warp_ok, patch) = match features {
        FeatureSource::Reference => {
            let (warped, in_bounds) = backward_warp(&inputs.frame_a.unit_image(), inputs.flow_bwd)?;
            ensure_finite(&warped.to_f64_vec(), "backward_warp")?;
            let fw = reference_features(&warped, config.feature_patch)?;
            let ft = reference_features(inputs.frame_b, config.feature_patch)?;
            (fw, ft, patch_mask(&in_bounds, config.feature_patch), config.feature_patch)
        }
        FeatureSource::Precomputed { source, target } => {
            let (fw, ok, patch) = warp_feature_grid(source, inputs.flow_bwd)?;
            if target.dims() != fw.dims() {
                return Err(RewardError::Shape(format!("feature grids {:?} vs {:?}", source.dims(), target.dims())));
            }
            (fw, target.clone(), ok, patch)
        }
    };
    let mut patch_weights: Vec<f64> = warp_ok.bits().iter().map(|&b| b as u8 as f64).collect();
    if let Some(conf_b) = inputs.confidence_b {
        let pc = patch_mean(conf_b, patch)?;
        for (wv, c) in patch_weights.iter_mut().zip(pc) {
            match config.gating {
                Gating::Off => {}
                Gating::Threshold { threshold } => *wv *= (c >= threshold) as u8 as f64,
                Gating::Weighted => *wv *= c.clamp(0.0, 1.0),
            }
        }
    }
    let r_dino = r_dino_weighted(&feat_warped, &feat_target, &patch_weights)?;
    let r_pair = blend(config.lambda, r_geo, r_dino);
    if !r_pair.is_finite() {
        return Err(RewardError::NonFinite { stage: "composite" });
    }

    Ok(PairScore {
        r_geo,
        r_dino,
        r_pair,
        valid_fraction: omega.count() as f64 / (h * w) as f64,
        maps: PairMaps { epe, depth_err, q_geo, omega, weights },
    })
}

/// Warps a source feature grid onto the target patch grid. The backward
/// flow is read at each patch center and divided by the patch size.
fn warp_feature_grid(source: &TensorGrid, flow_bwd: &TensorGrid) -> Result<(TensorGrid, ValidityMask, usize)> {
    let (hp, wp, c) = source.hwc()?;
    let (h, w, flow) = flow_field(flow_bwd, "backward flow")?;
    if h % hp != 0 || w % wp != 0 || h / hp != w / wp {
        return Err(RewardError::Shape(format!("feature grid {hp}x{wp} does not tile a {h}x{w} image")));
    }
    let patch = h / hp;
    let feats = source.float_values()?;
    let mut out = vec![0.0; hp * wp * c];
    let mut ok = ValidityMask::filled(hp, wp, false);
    let mut fxy = [0.0; 2];
    let center = (patch as f64 - 1.0) / 2.0;
    for py in 0..hp {
        for px in 0..wp {
            let (cx, cy) = (px as f64 * patch as f64 + center, py as f64 * patch as f64 + center);
            sample_into(&flow, h, w, 2, cx, cy, &mut fxy);
            let sx = px as f64 + fxy[0] / patch as f64;
            let sy = py as f64 + fxy[1] / patch as f64;
            let i = py * wp + px;
            ok.set(py, px, sample_into(&feats, hp, wp, c, sx, sy, &mut out[i * c..(i + 1) * c]));
        }
    }
    Ok((TensorGrid::f64_unchecked(vec![hp, wp, c], out), ok, patch))
}

/// Per-frame tensors of a video plus the flows of the pairs to score.
#[derive(Clone, Debug, Default)]
pub struct VideoInputs {
    pub frames: Vec<TensorGrid>,
    pub depth: Vec<TensorGrid>,
    pub intrinsics: Vec<Intrinsics>,
    pub extrinsics: Vec<PoseSE3>,
    pub confidence: Option<Vec<TensorGrid>>,
    pub features: Option<Vec<TensorGrid>>,
    /// `(a, b) -> (flow a->b, flow b->a)`.
    pub flows: std::collections::BTreeMap<(usize, usize), (TensorGrid, TensorGrid)>,
}

#[derive(Clone, Debug)]
pub struct VideoScore {
    /// `(tau, score)` for the pairs `(tau, tau + stride)`, in order.
    pub pair_scores: Vec<(usize, PairScore)>,
    pub r_video: f64,
}

impl VideoScore {
    pub fn report(&self, config: &RewardConfig) -> serde_json::Value {
        serde_json::json!({
            "pairs": self.pair_scores.iter().map(|(tau, s)| serde_json::json!({
                "tau": tau,
                "r_geo": s.r_geo,
                "r_dino": s.r_dino,
                "r_pair": s.r_pair,
                "valid_fraction": s.valid_fraction,
            })).collect::<Vec<_>>(),
            "r_video": self.r_video,
            "config": config,
        })
    }
}

pub fn score_video(video: &VideoInputs, config: &RewardConfig) -> Result<VideoScore> {
    config.validate()?;
    let n = video.frames.len();
    let stride = config.pair_stride;
    if n < stride + 1 {
        return Err(RewardError::Input(format!("{n} frames cannot form a pair at stride {stride}")));
    }
    if video.depth.len() != n || video.intrinsics.len() != n || video.extrinsics.len() != n {
        return Err(RewardError::Input("frames, depth and cameras must have one entry per frame".into()));
    }
    for (name, len) in [("confidence", video.confidence.as_ref().map(Vec::len)), ("features", video.features.as_ref().map(Vec::len))] {
        if let Some(len) = len {
            if len != n {
                return Err(RewardError::Input(format!("{name} has {len} entries for {n} frames")));
            }
        }
    }
    let taus: Vec<usize> = (0..n - stride).collect();
    for &tau in &taus {
        if !video.flows.contains_key(&(tau, tau + stride)) {
            return Err(RewardError::Input(format!("missing flow for pair ({tau}, {})", tau + stride)));
        }
    }
    let scores: Vec<Result<PairScore>> = taus
        .par_iter()
        .map(|&tau| {
            let b = tau + stride;
            let (fwd, bwd) = &video.flows[&(tau, b)];
            let inputs = PairInputs {
                frame_a: &video.frames[tau],
                frame_b: &video.frames[b],
                depth_a: &video.depth[tau],
                depth_b: &video.depth[b],
                k_a: &video.intrinsics[tau],
                k_b: &video.intrinsics[b],
                e_a: &video.extrinsics[tau],
                e_b: &video.extrinsics[b],
                flow_fwd: fwd,
                flow_bwd: bwd,
                confidence_a: video.confidence.as_ref().map(|c| &c[tau]),
                confidence_b: video.confidence.as_ref().map(|c| &c[b]),
            };
            let features = match &video.features {
                Some(f) => FeatureSource::Precomputed { source: &f[tau], target: &f[b] },
                None => FeatureSource::Reference,
            };
            score_pair(&inputs, features, config)
        })
        .collect();
    let pair_scores = taus.into_iter().zip(scores).map(|(t, s)| s.map(|s| (t, s))).collect::<Result<Vec<_>>>()?;
    let r_video = mean_in_order(pair_scores.iter().map(|(_, s)| s.r_pair));
    Ok(VideoScore { pair_scores, r_video })
}

/// Arithmetic mean with left-to-right summation.
pub fn mean_in_order(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    s / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(h: usize, w: usize, v: (f64, f64)) -> TensorGrid {
        TensorGrid::from_f64(vec![h, w, 2], [v.0, v.1].repeat(h * w)).unwrap()
    }

    #[test]
    fn epe_examples() {
        let e = normalized_epe(&flow(2, 2, (6.0, 0.0)), &flow(2, 2, (4.0, 0.0)), 1.0).unwrap();
        assert!((e.get(0) - 2.0 / 11.0).abs() < 1e-15);
        let e = normalized_epe(&flow(1, 1, (3.0, 4.0)), &flow(1, 1, (0.0, 0.0)), 1.0).unwrap();
        assert!((e.get(0) - 5.0 / 6.0).abs() < 1e-15);
        let f = flow(3, 2, (1.25, -7.0));
        assert!(normalized_epe(&f, &f, 1.5).unwrap().to_f64_vec().iter().all(|&v| v == 0.0));
        assert!(matches!(normalized_epe(&f, &flow(2, 3, (0.0, 0.0)), 1.0), Err(RewardError::Shape(_))));
    }

    #[test]
    fn depth_error_examples() {
        let a = TensorGrid::from_f64(vec![1, 3], vec![2.2, 2.0, 5.0]).unwrap();
        let b = TensorGrid::from_f64(vec![1, 3], vec![2.0, 2.0, 1.0]).unwrap();
        let covered = ValidityMask::from_bits(1, 3, vec![true, true, false]).unwrap();
        let e = relative_depth_error(&a, &b, 1.0, &covered).unwrap();
        assert!((e.get(0) - 0.2 / 3.0).abs() < 1e-15);
        assert_eq!(e.get(1), 0.0);
        assert_eq!(e.get(2), DEPTH_HOLE);
    }

    #[test]
    fn quality_examples() {
        let epe = TensorGrid::from_f64(vec![1, 3], vec![0.0, 1.7, 2.0 / 11.0]).unwrap();
        let de = TensorGrid::from_f64(vec![1, 3], vec![0.0, 0.3, 0.2 / 3.0]).unwrap();
        let q = geo_quality(&epe, &de).unwrap().to_f64_vec();
        assert_eq!(q[0], 1.0);
        assert_eq!(q[1], 0.0);
        assert!((q[2] - (9.0 / 11.0) * (2.8 / 3.0)).abs() < 1e-15);
        assert!((q[2] - 0.76364).abs() < 1e-5);
    }

    #[test]
    fn r_geo_examples() {
        let omega = ValidityMask::from_bits(1, 4, vec![true, true, true, false]).unwrap();
        let ones = TensorGrid::from_f64(vec![1, 4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(r_geo(&ones, &omega, None, Gating::Off).unwrap(), 0.0);
        let half = TensorGrid::from_f64(vec![1, 4], vec![0.5, 0.5, 0.5, 0.9]).unwrap();
        assert_eq!(r_geo(&half, &omega, None, Gating::Off).unwrap(), -0.5);
        let mixed = TensorGrid::from_f64(vec![1, 4], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert_eq!(r_geo(&mixed, &omega, None, Gating::Off).unwrap(), -0.5);
        let none = ValidityMask::filled(1, 4, false);
        assert!(matches!(r_geo(&mixed, &none, None, Gating::Off), Err(RewardError::EmptyMask(_))));
    }

    #[test]
    fn threshold_gating_drops_low_confidence() {
        let omega = ValidityMask::filled(1, 4, true);
        let conf = TensorGrid::from_f64(vec![1, 4], vec![0.9, 0.2, 0.6, 0.1]).unwrap();
        let q = TensorGrid::from_f64(vec![1, 4], vec![1.0, 0.0, 0.5, 0.3]).unwrap();
        let gated = r_geo(&q, &omega, Some(&conf), Gating::Threshold { threshold: 0.5 }).unwrap();
        assert_eq!(gated, -0.25);
        let weighted = r_geo(&q, &omega, Some(&conf), Gating::Weighted).unwrap();
        let expected = (0.9 * 1.0 + 0.6 * 0.5 + 0.1 * 0.3) / (0.9 + 0.2 + 0.6 + 0.1) - 1.0;
        assert!((weighted - expected).abs() < 1e-15);
    }

    #[test]
    fn r_dino_examples() {
        let a = TensorGrid::from_f64(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let orth = TensorGrid::from_f64(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let half = TensorGrid::from_f64(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let all = ValidityMask::filled(1, 2, true);
        assert_eq!(r_dino(&a, &a, &all).unwrap(), 0.0);
        assert_eq!(r_dino(&a, &orth, &all).unwrap(), -1.0);
        assert_eq!(r_dino(&a, &half, &all).unwrap(), -0.5);
        let zero = TensorGrid::zeros(vec![1, 2, 2]).unwrap();
        assert_eq!(r_dino(&zero, &a, &all).unwrap(), -1.0, "zero vectors count as cosine 0");
        let none = ValidityMask::filled(1, 2, false);
        assert!(matches!(r_dino(&a, &a, &none), Err(RewardError::EmptyMask(_))));
    }

    #[test]
    fn blend_example() {
        assert!((blend(0.5, -0.2, -0.4) - -0.3).abs() < 1e-15);
        assert_eq!(blend(1.0, -0.2, -0.4), -0.2);
        assert_eq!(blend(0.0, -0.2, -0.4), -0.4);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        assert!(RewardConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { eps_num: 0.0, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { pair_stride: 0, ..Default::default() }.validate().is_err());
        let json = r#"{"lambda":0.25,"gating":{"mode":"threshold","threshold":0.5}}"#;
        let c: RewardConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.gating, Gating::Threshold { threshold: 0.5 });
        assert_eq!(c.eps_num, 1.5);
    }

    #[test]
    fn video_mean() {
        assert!((mean_in_order([-0.1, -0.3].into_iter()) - -0.2).abs() < 1e-15);
    }
}
