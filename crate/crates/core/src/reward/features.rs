//! Deterministic patch descriptor used when no learned feature grids are supplied.

use crate::grid::{TensorGrid, ValidityMask};

use super::{RewardError, Result};

/// Channels per patch: mean RGB, RGB standard deviation, 6 orientation bins.
pub const FEATURE_CHANNELS: usize = 12;
const ORIENTATION_BINS: usize = 6;

/// Patch features of an `H x W x 3` image.
///
/// Images whose sides are not multiples of `patch` are cropped to the largest
/// multiple (right and bottom remainders are ignored). The orientation
/// histogram accumulates luminance gradient magnitude into six unsigned bins
/// of 30 degrees, normalized by the patch pixel count. Gradients are taken
/// inside each patch only (clamped central differences), so a patch's
/// descriptor depends on its own pixels and nothing else.
pub fn reference_features(image: &TensorGrid, patch: usize) -> Result<TensorGrid> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return Err(RewardError::Shape(format!("expected an RGB image, got {c} channels")));
    }
    if patch == 0 || patch > h.min(w) {
        return Err(RewardError::Config(format!("patch size {patch} does not fit a {h}x{w} image")));
    }
    let px = image.unit_image().to_f64_vec();
    let (hp, wp) = (h / patch, w / patch);
    let n = (patch * patch) as f64;
    let mut out = vec![0.0; hp * wp * FEATURE_CHANNELS];
    let mut lum = vec![0.0; patch * patch];

    for py in 0..hp {
        for pxi in 0..wp {
            let f = &mut out[(py * wp + pxi) * FEATURE_CHANNELS..][..FEATURE_CHANNELS];
            let (y0, x0) = (py * patch, pxi * patch);
            for dy in 0..patch {
                for dx in 0..patch {
                    let base = ((y0 + dy) * w + x0 + dx) * 3;
                    let rgb = &px[base..base + 3];
                    for k in 0..3 {
                        f[k] += rgb[k];
                        f[3 + k] += rgb[k] * rgb[k];
                    }
                    lum[dy * patch + dx] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                }
            }
            for k in 0..3 {
                let mean = f[k] / n;
                f[k] = mean;
                f[3 + k] = (f[3 + k] / n - mean * mean).max(0.0).sqrt();
            }
            let at = |yy: usize, xx: usize| lum[yy * patch + xx];
            for dy in 0..patch {
                for dx in 0..patch {
                    let (xl, xr) = (dx.saturating_sub(1), (dx + 1).min(patch - 1));
                    let (yu, yd) = (dy.saturating_sub(1), (dy + 1).min(patch - 1));
                    let gx = (at(dy, xr) - at(dy, xl)) / 2.0;
                    let gy = (at(yd, dx) - at(yu, dx)) / 2.0;
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                    let bin = ((theta / (std::f64::consts::PI / ORIENTATION_BINS as f64)) as usize).min(ORIENTATION_BINS - 1);
                    f[6 + bin] += mag / n;
                }
            }
        }
    }
    Ok(TensorGrid::f64_unchecked(vec![hp, wp, FEATURE_CHANNELS], out))
}

/// A patch is valid when every pixel it covers is valid. Remainder pixels
/// beyond the last full patch are ignored, matching [`reference_features`].
pub fn patch_mask(mask: &ValidityMask, patch: usize) -> ValidityMask {
    let (hp, wp) = (mask.height() / patch, mask.width() / patch);
    let mut out = ValidityMask::filled(hp, wp, true);
    for py in 0..hp {
        for px in 0..wp {
            let all = (0..patch).all(|dy| (0..patch).all(|dx| mask.get(py * patch + dy, px * patch + dx)));
            out.set(py, px, all);
        }
    }
    out
}

/// Mean of a single-channel map inside each full patch.
pub fn patch_mean(map: &TensorGrid, patch: usize) -> Result<Vec<f64>> {
    let (h, w, c) = map.hwc()?;
    if c != 1 {
        return Err(RewardError::Shape(format!("expected a single-channel map, got {c}")));
    }
    let v = map.to_f64_vec();
    let (hp, wp) = (h / patch, w / patch);
    let mut out = vec![0.0; hp * wp];
    for py in 0..hp {
        for px in 0..wp {
            let mut s = 0.0;
            for dy in 0..patch {
                for dx in 0..patch {
                    s += v[(py * patch + dy) * w + px * patch + dx];
                }
            }
            out[py * wp + px] = s / (patch * patch) as f64;
        }
    }
    Ok(out)
}
