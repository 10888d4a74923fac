//! Directory layout shared by synthetic dumps and real predictor outputs.
//!
//! ```text
//! cameras.json              {"frames": [{"intrinsics": [fx, fy, cx, cy], "extrinsics": [[..4], [..4], [..4]]}, ...]}
//! frames/0000.gft           H x W x 3, u8 or float in [0, 1]
//! depth/0000.gft            H x W, meters
//! flow_fwd/0000_0001.gft    H x W x 2, flow from frame 0 to frame 1
//! flow_bwd/0000_0001.gft    H x W x 2, flow from frame 1 to frame 0
//! confidence/0000.gft       optional, H x W in [0, 1]
//! features/0000.gft         optional, h x w x C
//! masks/0000.gft            optional, H x W u8, 1 = static background
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, Intrinsics, PoseSE3};
use crate::gft::{load_tensor, save_tensor};
use crate::grid::{GridError, TensorGrid, ValidityMask};
use crate::reward::VideoInputs;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("missing input: {0}")]
    Missing(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub intrinsics: Intrinsics,
    pub extrinsics: PoseSE3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasFile {
    pub frames: Vec<CameraEntry>,
}

/// A video in memory: reward inputs plus optional static-background masks.
#[derive(Clone, Debug, Default)]
pub struct VideoBundle {
    pub video: VideoInputs,
    pub static_masks: Option<Vec<ValidityMask>>,
}

fn frame_name(tau: usize) -> String {
    format!("{tau:04}.gft")
}

fn pair_name(a: usize, b: usize) -> String {
    format!("{a:04}_{b:04}.gft")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AdapterError + '_ {
    move |source| AdapterError::Io { path: path.display().to_string(), source }
}

fn load_required(dir: &Path, sub: &str, name: &str) -> Result<TensorGrid> {
    let path = dir.join(sub).join(name);
    if !path.is_file() {
        return Err(AdapterError::Missing(format!("{sub}/{name}")));
    }
    Ok(load_tensor(&path)?)
}

/// Sorted `.gft` stems of a subdirectory, or `None` when it does not exist.
fn list_stems(dir: &Path) -> Result<Option<Vec<String>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "gft") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(Some(stems))
}

pub fn read_cameras(dir: &Path) -> Result<CamerasFile> {
    let path = dir.join("cameras.json");
    if !path.is_file() {
        return Err(AdapterError::Missing("cameras.json".into()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| AdapterError::Json { path: path.display().to_string(), source })
}

/// Number of frames, taken from `frames/`, which must hold `0000.gft ..` without gaps.
pub fn frame_count(dir: &Path) -> Result<usize> {
    let stems = list_stems(&dir.join("frames"))?.ok_or_else(|| AdapterError::Missing("frames/".into()))?;
    if stems.is_empty() {
        return Err(AdapterError::Missing("frames/0000.gft".into()));
    }
    for (i, s) in stems.iter().enumerate() {
        if *s != format!("{i:04}") {
            return Err(AdapterError::Layout(format!("frames/ must be numbered from 0000 without gaps, found {s}.gft")));
        }
    }
    Ok(stems.len())
}

/// All flow pairs present in `flow_fwd/`, each with its `flow_bwd/` partner.
pub fn read_flows(dir: &Path) -> Result<BTreeMap<(usize, usize), (TensorGrid, TensorGrid)>> {
    let stems = list_stems(&dir.join("flow_fwd"))?.ok_or_else(|| AdapterError::Missing("flow_fwd/".into()))?;
    let mut flows = BTreeMap::new();
    for stem in stems {
        let parsed = stem.split_once('_').and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
        let Some((a, b)) = parsed else {
            return Err(AdapterError::Layout(format!("flow_fwd/{stem}.gft is not named AAAA_BBBB.gft")));
        };
        let fwd = load_required(dir, "flow_fwd", &pair_name(a, b))?;
        let bwd = load_required(dir, "flow_bwd", &pair_name(a, b))?;
        flows.insert((a, b), (fwd, bwd));
    }
    Ok(flows)
}

fn read_optional(dir: &Path, sub: &str, n: usize) -> Result<Option<Vec<TensorGrid>>> {
    if !dir.join(sub).is_dir() {
        return Ok(None);
    }
    (0..n).map(|tau| load_required(dir, sub, &frame_name(tau))).collect::<Result<Vec<_>>>().map(Some)
}

pub fn read_masks(dir: &Path, n: usize) -> Result<Option<Vec<ValidityMask>>> {
    read_optional(dir, "masks", n)?
        .map(|grids| grids.iter().map(|g| ValidityMask::from_grid(g).map_err(AdapterError::from)).collect())
        .transpose()
}

/// Loads a complete video directory. Required pieces are checked in the
/// order frames, depth, cameras, flows so the first missing one is named.
pub fn read_bundle(dir: &Path) -> Result<VideoBundle> {
    let n = frame_count(dir)?;
    let frames = (0..n).map(|t| load_required(dir, "frames", &frame_name(t))).collect::<Result<Vec<_>>>()?;
    if !dir.join("depth").is_dir() {
        return Err(AdapterError::Missing("depth/".into()));
    }
    let depth = (0..n).map(|t| load_required(dir, "depth", &frame_name(t))).collect::<Result<Vec<_>>>()?;
    let cameras = read_cameras(dir)?;
    if cameras.frames.len() != n {
        return Err(AdapterError::Layout(format!("cameras.json lists {} frames, frames/ holds {n}", cameras.frames.len())));
    }
    let flows = read_flows(dir)?;
    Ok(VideoBundle {
        video: VideoInputs {
            frames,
            depth,
            intrinsics: cameras.frames.iter().map(|c| c.intrinsics).collect(),
            extrinsics: cameras.frames.iter().map(|c| c.extrinsics).collect(),
            confidence: read_optional(dir, "confidence", n)?,
            features: read_optional(dir, "features", n)?,
            flows,
        },
        static_masks: read_masks(dir, n)?,
    })
}

/// Names the flow files a stride needs, failing on the first absent pair.
pub fn check_stride(bundle: &VideoBundle, stride: usize) -> Result<()> {
    let n = bundle.video.frames.len();
    for a in 0..n.saturating_sub(stride) {
        if !bundle.video.flows.contains_key(&(a, a + stride)) {
            return Err(AdapterError::Missing(format!("flow_fwd/{}", pair_name(a, a + stride))));
        }
    }
    Ok(())
}

fn write_grid(root: &Path, sub: &str, name: &str, grid: &TensorGrid) -> Result<PathBuf> {
    let dir = root.join(sub);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(name);
    save_tensor(grid, &path)?;
    Ok(path)
}

/// Writes a bundle in the adapter layout. Float tensors are stored as f32.
/// Returns the written paths in a stable order.
pub fn write_bundle(bundle: &VideoBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    let v = &bundle.video;
    let mut written = Vec::new();
    let as_f32 = |g: &TensorGrid| if g.dtype().is_float() { g.to_f32() } else { g.clone() };
    for (t, g) in v.frames.iter().enumerate() {
        written.push(write_grid(dir, "frames", &frame_name(t), &as_f32(g))?);
    }
    for (t, g) in v.depth.iter().enumerate() {
        written.push(write_grid(dir, "depth", &frame_name(t), &as_f32(g))?);
    }
    for (sub, grids) in [("confidence", &v.confidence), ("features", &v.features)] {
        for (t, g) in grids.iter().flatten().enumerate() {
            written.push(write_grid(dir, sub, &frame_name(t), &as_f32(g))?);
        }
    }
    for (t, m) in bundle.static_masks.iter().flatten().enumerate() {
        written.push(write_grid(dir, "masks", &frame_name(t), &m.to_grid())?);
    }
    for (&(a, b), (fwd, bwd)) in &v.flows {
        written.push(write_grid(dir, "flow_fwd", &pair_name(a, b), &as_f32(fwd))?);
        written.push(write_grid(dir, "flow_bwd", &pair_name(a, b), &as_f32(bwd))?);
    }
    let cameras = CamerasFile {
        frames: v.intrinsics.iter().zip(&v.extrinsics).map(|(&intrinsics, &extrinsics)| CameraEntry { intrinsics, extrinsics }).collect(),
    };
    let path = dir.join("cameras.json");
    let text = serde_json::to_string_pretty(&cameras).expect("camera entries serialize");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}
