//! Dense row-major tensors, validity masks, bilinear sampling and backward warping.
//!
//! Pixel centers sit at integer coordinates with the origin at the top-left
//! pixel, `x` pointing right and `y` pointing down. Multi-channel grids are
//! stored channels-last (`H x W x C`).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("type error: {0}")]
    Type(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("GFT format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        !matches!(self, DType::U8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl GridData {
    fn len(&self) -> usize {
        match self {
            GridData::F32(v) => v.len(),
            GridData::F64(v) => v.len(),
            GridData::U8(v) => v.len(),
        }
    }
}

/// Dense row-major tensor. The buffer length always equals the product of `dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGrid {
    dims: Vec<usize>,
    data: GridData,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > 8 {
        return Err(GridError::Shape(format!("rank must be 1..=8, got {}", dims.len())));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(GridError::Shape(format!("dimension {i} is zero")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| GridError::Shape("element count overflows".into()))
}

impl TensorGrid {
    pub fn new(dims: Vec<usize>, data: GridData) -> Result<Self> {
        let n = check_dims(&dims)?;
        if data.len() != n {
            return Err(GridError::Shape(format!(
                "buffer holds {} elements but dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        let grid = TensorGrid { dims, data };
        grid.check_finite()?;
        Ok(grid)
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, GridData::F64(data))
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, GridData::F32(data))
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, GridData::U8(data))
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        Ok(TensorGrid { dims, data: GridData::F64(vec![0.0; n]) })
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Result<Self> {
        let n = check_dims(&dims)?;
        Self::new(dims, GridData::F64(vec![value; n]))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &GridData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            GridData::F32(_) => DType::F32,
            GridData::F64(_) => DType::F64,
            GridData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = match &self.data {
            GridData::F32(v) => v.iter().position(|x| !x.is_finite()),
            GridData::F64(v) => v.iter().position(|x| !x.is_finite()),
            GridData::U8(_) => None,
        };
        match bad {
            Some(i) => Err(GridError::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// Element at a flat index, widened to f64.
    pub fn get(&self, i: usize) -> f64 {
        match &self.data {
            GridData::F32(v) => v[i] as f64,
            GridData::F64(v) => v[i],
            GridData::U8(v) => v[i] as f64,
        }
    }

    /// Copy of the buffer widened to f64 (u8 values are kept as 0..=255).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            GridData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            GridData::F64(v) => v.clone(),
            GridData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Float view of the values; errors on integer grids.
    pub fn float_values(&self) -> Result<Vec<f64>> {
        if !self.dtype().is_float() {
            return Err(GridError::Type("expected a float grid, got u8".into()));
        }
        Ok(self.to_f64_vec())
    }

    /// Image values in [0, 1]: u8 grids are divided by 255, float grids pass through.
    pub fn unit_image(&self) -> TensorGrid {
        let values = match &self.data {
            GridData::U8(v) => v.iter().map(|&x| x as f64 / 255.0).collect(),
            _ => self.to_f64_vec(),
        };
        TensorGrid { dims: self.dims.clone(), data: GridData::F64(values) }
    }

    pub fn to_f32(&self) -> TensorGrid {
        let values = match &self.data {
            GridData::F32(v) => v.clone(),
            other => (0..other.len()).map(|i| self.get(i) as f32).collect(),
        };
        TensorGrid { dims: self.dims.clone(), data: GridData::F32(values) }
    }

    pub fn to_f64(&self) -> TensorGrid {
        TensorGrid { dims: self.dims.clone(), data: GridData::F64(self.to_f64_vec()) }
    }

    /// Interprets the grid as an image `H x W x C` (a rank-2 grid has one channel).
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w] => Ok((h, w, 1)),
            &[h, w, c] => Ok((h, w, c)),
            d => Err(GridError::Shape(format!("expected H x W or H x W x C, got {d:?}"))),
        }
    }

    pub(crate) fn f64_unchecked(dims: Vec<usize>, data: Vec<f64>) -> TensorGrid {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        TensorGrid { dims, data: GridData::F64(data) }
    }
}

/// Per-pixel boolean mask over an `H x W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        ValidityMask { height, width, bits: vec![value; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(GridError::Shape(format!(
                "mask has {} bits for a {height} x {width} grid",
                bits.len()
            )));
        }
        Ok(ValidityMask { height, width, bits })
    }

    /// Mask from a grid: nonzero values are `true`.
    pub fn from_grid(grid: &TensorGrid) -> Result<Self> {
        let (h, w, c) = grid.hwc()?;
        if c != 1 {
            return Err(GridError::Shape(format!("mask grid must have one channel, got {c}")));
        }
        Ok(ValidityMask { height: h, width: w, bits: (0..h * w).map(|i| grid.get(i) != 0.0).collect() })
    }

    pub fn to_grid(&self) -> TensorGrid {
        TensorGrid {
            dims: vec![self.height, self.width],
            data: GridData::U8(self.bits.iter().map(|&b| b as u8).collect()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.height != other.height || self.width != other.width {
            return Err(GridError::Shape(format!(
                "mask dims {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Ok(ValidityMask { height: self.height, width: self.width, bits })
    }
}

/// Bilinear lookup into a channels-last buffer. Writes zeros and returns
/// `false` when `(x, y)` falls outside `[0, W-1] x [0, H-1]`.
pub(crate) fn sample_into(
    values: &[f64],
    h: usize,
    w: usize,
    c: usize,
    x: f64,
    y: f64,
    out: &mut [f64],
) -> bool {
    out.iter_mut().for_each(|v| *v = 0.0);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return false;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let taps = [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ];
    for (yy, xx, wgt) in taps {
        if wgt == 0.0 {
            continue;
        }
        let base = (yy * w + xx) * c;
        for (k, o) in out.iter_mut().enumerate() {
            *o += wgt * values[base + k];
        }
    }
    true
}

/// Bilinear sample of a float grid at continuous pixel coordinate `(x, y)`.
///
/// Returns the channel vector and whether the coordinate was in bounds.
/// Out-of-bounds samples are all-zero rather than clamped.
pub fn bilinear_sample(grid: &TensorGrid, x: f64, y: f64) -> Result<(Vec<f64>, bool)> {
    let (h, w, c) = grid.hwc()?;
    let values = grid.float_values()?;
    let mut out = vec![0.0; c];
    let inside = sample_into(&values, h, w, c, x, y, &mut out);
    Ok((out, inside))
}

/// Backward warp: `warped(u) = source(u + flow(u))`, with `mask(u)` the in-bounds flag.
pub fn backward_warp(source: &TensorGrid, backward_flow: &TensorGrid) -> Result<(TensorGrid, ValidityMask)> {
    let (h, w, c) = source.hwc()?;
    let (fh, fw, fc) = backward_flow.hwc()?;
    if fh != h || fw != w || fc != 2 {
        return Err(GridError::Shape(format!(
            "source is {h}x{w}, flow is {:?} (expected {h}x{w}x2)",
            backward_flow.dims()
        )));
    }
    let src = source.float_values()?;
    let flow = backward_flow.float_values()?;
    let mut out = vec![0.0; h * w * c];
    let mut mask = ValidityMask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow[2 * i];
            let sy = y as f64 + flow[2 * i + 1];
            let inside = sample_into(&src, h, w, c, sx, sy, &mut out[i * c..(i + 1) * c]);
            mask.bits[i] = inside;
        }
    }
    Ok((TensorGrid::f64_unchecked(source.dims().to_vec(), out), mask))
}
