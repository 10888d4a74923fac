//! Controlled inconsistencies and the latent-to-scene decoder.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{render_pair, Look, RenderedPair, Result, Scene, SceneSpec, SynthError};
use crate::grid::{TensorGrid, ValidityMask};
use crate::rng::{derive, stream};

pub const LATENT_DIM: usize = 4;

const WOBBLE_TAG: u64 = 0x77;
const DEPTH_TAG: u64 = 0xd3;
const WAVES: usize = 5;

/// Which tensors a perturbation corrupts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    /// Corrupt the rendered target frame and leave the flows exact.
    #[default]
    Appearance,
    /// Leave the frames exact and corrupt the flow tensors instead.
    Flow,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Peak displacement of the smooth warp applied to the target frame (pixels).
    pub wobble_px: f64,
    /// Background texture slide per frame (pixels).
    pub texture_drift_px: f64,
    /// Relative growth of the moving object per frame: the target frame
    /// shows it scaled by `1 + object_morph`.
    pub object_morph: f64,
    /// Standard deviation of the log of the multiplicative depth noise.
    pub depth_noise_rel: f64,
    pub target: PerturbTarget,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.amplitudes() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Perturbation(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn amplitudes(&self) -> [(&'static str, f64); 4] {
        [
            ("wobble_px", self.wobble_px),
            ("texture_drift_px", self.texture_drift_px),
            ("object_morph", self.object_morph),
            ("depth_noise_rel", self.depth_noise_rel),
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.amplitudes().iter().all(|(_, v)| *v == 0.0)
    }

    /// Sets one field from a `key=value` command-line pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "target" {
            self.target = match value {
                "appearance" => PerturbTarget::Appearance,
                "flow" => PerturbTarget::Flow,
                other => return Err(SynthError::Perturbation(format!("unknown target {other:?}"))),
            };
            return Ok(());
        }
        let v: f64 = value.parse().map_err(|_| SynthError::Perturbation(format!("{key}: {value:?} is not a number")))?;
        match key {
            "wobble_px" => self.wobble_px = v,
            "texture_drift_px" => self.texture_drift_px = v,
            "object_morph" => self.object_morph = v,
            "depth_noise_rel" => self.depth_noise_rel = v,
            other => return Err(SynthError::Perturbation(format!("unknown perturbation key {other:?}"))),
        }
        self.validate()
    }
}

/// Smooth divergence-free displacement field: the curl of a sum of random
/// plane waves, scaled so that its peak magnitude over the pixel grid equals
/// the requested amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct WobbleField {
    /// `(kx, ky, phase, weight)` per wave.
    waves: Vec<[f64; 4]>,
    gain: f64,
}

impl WobbleField {
    pub fn new(seed: u64, amplitude: f64, height: usize, width: usize) -> Self {
        let mut rng = stream(seed, &[WOBBLE_TAG]);
        let tau = std::f64::consts::TAU;
        let waves = (0..WAVES)
            .map(|_| {
                let angle = rng.random::<f64>() * tau;
                let k = tau / rng.random_range(14.0..28.0);
                [k * angle.cos(), k * angle.sin(), rng.random::<f64>() * tau, rng.random_range(0.5..1.0)]
            })
            .collect();
        let mut field = WobbleField { waves, gain: 1.0 };
        let mut peak: f64 = 0.0;
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = field.displacement(x as f64, y as f64);
                peak = peak.max(dx.hypot(dy));
            }
        }
        field.gain = if peak > 0.0 { amplitude / peak } else { 0.0 };
        field
    }

    /// `(d psi / dy, -d psi / dx)` for the stream function `psi`.
    pub fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut dx, mut dy) = (0.0, 0.0);
        for &[kx, ky, phase, weight] in &self.waves {
            let c = weight * (kx * x + ky * y + phase).cos();
            dx += ky * c;
            dy -= kx * c;
        }
        (self.gain * dx, self.gain * dy)
    }
}

/// Appearance of frame `tau` in a synthesized video (frame 0 is clean).
pub(crate) fn frame_look(p: &PerturbationSpec, seed: u64, tau: usize, h: usize, w: usize) -> Look {
    if tau == 0 {
        return Look::default();
    }
    Look {
        wobble: (p.wobble_px > 0.0).then(|| WobbleField::new(derive(seed, &[tau as u64]), p.wobble_px, h, w)),
        drift_px: tau as f64 * p.texture_drift_px,
        object_scale: (1.0 + p.object_morph).powi(tau as i32),
    }
}

/// Multiplies every depth by an independent `exp(rel * N(0, 1))` factor.
pub(crate) fn noisy_depth(mut depth: Vec<f64>, rel: f64, seed: u64, frame: usize) -> Vec<f64> {
    if rel > 0.0 {
        let mut rng = stream(seed, &[DEPTH_TAG, frame as u64]);
        for d in depth.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *d *= (rel * n).exp();
        }
    }
    depth
}

/// Flow-target corruption: the wobble field is added to the forward flow and
/// subtracted from the backward flow; the background drift likewise.
pub(crate) fn corrupt_flow(
    fwd: &mut [f64],
    bwd: &mut [f64],
    wobble: Option<&WobbleField>,
    drift: f64,
    static_a: &ValidityMask,
    static_b: &ValidityMask,
) {
    let w = static_a.width();
    for (i, (f, b)) in fwd.chunks_exact_mut(2).zip(bwd.chunks_exact_mut(2)).enumerate() {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        if let Some(wf) = wobble {
            let (dx, dy) = wf.displacement(x, y);
            f[0] += dx;
            f[1] += dy;
            b[0] -= dx;
            b[1] -= dy;
        }
        if static_a.bits()[i] {
            f[0] += drift;
        }
        if static_b.bits()[i] {
            b[0] -= drift;
        }
    }
}

/// Corrupts a rendered pair. Appearance perturbations re-render the target
/// frame from the pair's scene; the flows keep their exact values. The
/// all-zero spec returns the pair unchanged.
pub fn inject_perturbation(pair: &RenderedPair, p: &PerturbationSpec, seed: u64) -> Result<RenderedPair> {
    p.validate()?;
    if p.is_zero() {
        return Ok(pair.clone());
    }
    let mut out = pair.clone();
    let (h, w) = (pair.scene.height, pair.scene.width);
    let frames = pair.frame_b.abs_diff(pair.frame_a) as f64;
    let wobble = (p.wobble_px > 0.0).then(|| WobbleField::new(derive(seed, &[WOBBLE_TAG]), p.wobble_px, h, w));
    let drift = frames * p.texture_drift_px;
    match p.target {
        PerturbTarget::Appearance => {
            if wobble.is_some() || drift > 0.0 || p.object_morph > 0.0 {
                let look = Look { wobble, drift_px: drift, object_scale: (1.0 + p.object_morph).powf(frames) };
                let (img, _, _) = Scene::new(&pair.scene)?.render(pair.frame_b, &look)?;
                out.image_b = TensorGrid::from_f64(vec![h, w, 3], img)?;
            }
        }
        PerturbTarget::Flow => {
            let mut fwd = pair.flow_fwd.to_f64_vec();
            let mut bwd = pair.flow_bwd.to_f64_vec();
            let not_object = |m: &ValidityMask| {
                ValidityMask::from_bits(h, w, m.bits().iter().map(|&b| !b).collect()).expect("same dims")
            };
            corrupt_flow(&mut fwd, &mut bwd, wobble.as_ref(), drift, &not_object(&pair.object_mask_a), &not_object(&pair.object_mask_b));
            out.flow_fwd = TensorGrid::from_f64(vec![h, w, 2], fwd)?;
            out.flow_bwd = TensorGrid::from_f64(vec![h, w, 2], bwd)?;
        }
    }
    if p.depth_noise_rel > 0.0 {
        let noisy = |g: &TensorGrid, frame| TensorGrid::from_f64(vec![h, w], noisy_depth(g.to_f64_vec(), p.depth_noise_rel, seed, frame));
        out.depth_a = noisy(&pair.depth_a, 0)?;
        out.depth_b = noisy(&pair.depth_b, 1)?;
    }
    Ok(out)
}

/// Amplitudes decoded from a latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedLatent {
    pub perturbation: PerturbationSpec,
    /// Camera displacement along world X between the two frames (meters).
    pub camera_tx: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `tanh(softplus(raw))`: monotone, zero in the negative limit, below one.
fn squash(raw: f64) -> f64 {
    softplus(raw).tanh()
}

/// Maps `z = (wobble, drift, morph, camera speed)` raw values to amplitudes:
/// wobble in `[0, 4]` px, drift in `[0, 2]` px, object scale in `[1, 1.5]`
/// and camera shift in `[0, 0.2]` m.
pub fn latent_amplitudes(z: &[f64]) -> Result<DecodedLatent> {
    if z.len() != LATENT_DIM {
        return Err(SynthError::Shape(format!("latent must have {LATENT_DIM} entries, got {}", z.len())));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(SynthError::Perturbation("latent contains a non-finite value".into()));
    }
    Ok(DecodedLatent {
        perturbation: PerturbationSpec {
            wobble_px: 4.0 * squash(z[0]),
            texture_drift_px: 2.0 * squash(z[1]),
            object_morph: 0.5 * squash(z[2]),
            depth_noise_rel: 0.0,
            target: PerturbTarget::Appearance,
        },
        camera_tx: 0.2 * squash(z[3]),
    })
}

/// Renders the template with the decoded camera motion, then injects the
/// decoded perturbation. Deterministic in `(z, template, seed)`.
pub fn decode_latent(z: &[f64], template: &SceneSpec, seed: u64) -> Result<RenderedPair> {
    let d = latent_amplitudes(z)?;
    let pair = render_pair(&template.with_camera_shift(d.camera_tx), 0)?;
    inject_perturbation(&pair, &d.perturbation, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wobble_is_divergence_free_with_requested_peak() {
        let f = WobbleField::new(3, 2.0, 48, 48);
        let mut peak: f64 = 0.0;
        let h = 1e-4;
        for y in 0..48 {
            for x in 0..48 {
                let (x, y) = (x as f64, y as f64);
                let (dx, dy) = f.displacement(x, y);
                peak = peak.max(dx.hypot(dy));
                let div = (f.displacement(x + h, y).0 - f.displacement(x - h, y).0) / (2.0 * h)
                    + (f.displacement(x, y + h).1 - f.displacement(x, y - h).1) / (2.0 * h);
                assert!(div.abs() < 1e-7);
            }
        }
        assert!((peak - 2.0).abs() < 1e-12);
        assert_eq!(WobbleField::new(3, 0.0, 48, 48).displacement(5.0, 5.0), (0.0, 0.0));
    }

    #[test]
    fn squash_limits() {
        assert!(squash(-40.0) < 1e-15);
        assert!(squash(40.0) <= 1.0 && squash(40.0) > 0.999);
        let d = latent_amplitudes(&[0.0; 4]).unwrap();
        assert!((d.perturbation.wobble_px - 4.0 * 2f64.ln().tanh()).abs() < 1e-15);
        assert!(matches!(latent_amplitudes(&[0.0; 3]), Err(SynthError::Shape(_))));
    }

    #[test]
    fn set_from_cli_pairs() {
        let mut p = PerturbationSpec::default();
        p.set("wobble_px", "2").unwrap();
        p.set("target", "flow").unwrap();
        assert_eq!(p.wobble_px, 2.0);
        assert_eq!(p.target, PerturbTarget::Flow);
        assert!(p.set("wobble_px", "-1").is_err());
        assert!(p.set("colour", "1").is_err());
    }
}
