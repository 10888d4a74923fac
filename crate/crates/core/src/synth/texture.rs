//! Procedural multi-octave value noise.

use crate::rng::{splitmix64, unit_from_hash};

pub const OCTAVES: u32 = 4;

/// RGB value noise over a 2-D surface coordinate (meters).
#[derive(Clone, Copy, Debug)]
pub struct ValueNoise {
    seed: u64,
    /// Lattice spacing of the coarsest octave, in meters.
    base_cell: f64,
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn corner(seed: u64, octave: u32, ix: i64, iy: i64) -> [f64; 3] {
    let mut h = splitmix64(seed ^ (octave as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    h = splitmix64(h ^ ix as u64);
    h = splitmix64(h ^ (iy as u64).rotate_left(29));
    // three channels from disjoint 21-bit slices of one hash
    let c = |s: u32| unit_from_hash(((h >> s) & 0x1f_ffff) << 43);
    [c(0), c(21), c(42)]
}

impl ValueNoise {
    pub fn new(seed: u64, base_cell: f64) -> Self {
        ValueNoise { seed, base_cell }
    }

    /// Color at surface coordinate `(x, y)`; every channel lies in `[0, 1]`.
    pub fn rgb(&self, x: f64, y: f64) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut amp = 1.0;
        let mut total = 0.0;
        for o in 0..OCTAVES {
            let freq = (1u32 << o) as f64 / self.base_cell;
            // per-octave lattice offsets keep the octaves' grid lines apart
            let off = 0.37 * o as f64;
            let (xs, ys) = (x * freq + off, y * freq - off);
            let (fx0, fy0) = (xs.floor(), ys.floor());
            let (ix, iy) = (fx0 as i64, fy0 as i64);
            let (tx, ty) = (fade(xs - fx0), fade(ys - fy0));
            let v00 = corner(self.seed, o, ix, iy);
            let v10 = corner(self.seed, o, ix + 1, iy);
            let v01 = corner(self.seed, o, ix, iy + 1);
            let v11 = corner(self.seed, o, ix + 1, iy + 1);
            for k in 0..3 {
                let top = v00[k] + (v10[k] - v00[k]) * tx;
                let bot = v01[k] + (v11[k] - v01[k]) * tx;
                acc[k] += amp * (top + (bot - top) * ty);
            }
            total += amp;
            amp *= 0.5;
        }
        acc.map(|v| v / total)
    }
}
