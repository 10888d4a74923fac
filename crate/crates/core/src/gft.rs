//! GFT tensor files.
//!
//! Little-endian layout: `"GFT1"` magic, one dtype byte (1 = f32, 2 = f64,
//! 3 = u8), one rank byte (1..=8), two reserved zero bytes, `rank` u64 dims,
//! then the row-major payload.

use std::fs;
use std::path::Path;

use crate::grid::{DType, GridData, GridError, Result, TensorGrid};

const MAGIC: &[u8; 4] = b"GFT1";
const HEADER_LEN: usize = 8;

fn format_err(field: &'static str, detail: impl Into<String>) -> GridError {
    GridError::Format { field, detail: detail.into() }
}

pub fn encode(grid: &TensorGrid) -> Vec<u8> {
    let dtype = grid.dtype();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * grid.dims().len() + grid.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(grid.dims().len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in grid.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match grid.data() {
        GridData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        GridData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        GridData::U8(v) => out.extend_from_slice(v),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<TensorGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err("header", format!("{} bytes is shorter than the 8-byte header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err("magic", format!("expected \"GFT1\", found {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| format_err("dtype", format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if !(1..=8).contains(&rank) {
        return Err(format_err("rank", format!("rank {rank} outside 1..=8")));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(format_err("reserved", "reserved bytes must be zero"));
    }
    let dims_end = HEADER_LEN + 8 * rank;
    if bytes.len() < dims_end {
        return Err(format_err("dims", "file truncated inside the dims table"));
    }
    let mut dims = Vec::with_capacity(rank);
    for chunk in bytes[HEADER_LEN..dims_end].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        if d == 0 {
            return Err(format_err("dims", "zero-sized dimension"));
        }
        let d = usize::try_from(d).map_err(|_| format_err("dims", format!("dimension {d} overflows")))?;
        dims.push(d);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err("dims", "element count overflows"))?;
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err("dims", "payload size overflows"))?;
    let payload = &bytes[dims_end..];
    if payload.len() != expected {
        return Err(format_err(
            "payload length",
            format!("expected {expected} bytes for dims {dims:?}, found {}", payload.len()),
        ));
    }
    let data = match dtype {
        DType::F32 => GridData::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::F64 => GridData::F64(
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::U8 => GridData::U8(payload.to_vec()),
    };
    TensorGrid::new(dims, data).map_err(|e| match e {
        GridError::NonFinite(i) => format_err("payload", format!("non-finite value at element {i}")),
        other => other,
    })
}

pub fn save_tensor(grid: &TensorGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(grid)).map_err(|source| GridError::Io { path: path.display().to_string(), source })
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| GridError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}
