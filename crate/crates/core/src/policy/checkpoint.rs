//! Policy checkpoints: one tensor file per parameter block plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyError, Result, VelocityPolicy};
use crate::gft::{load_tensor, save_tensor};
use crate::grid::TensorGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyManifest {
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub blocks: Vec<String>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn io(path: &Path, e: std::io::Error) -> PolicyError {
    PolicyError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes `dir/<block>.gft` (f64) and `dir/manifest.json`.
pub fn save_policy(policy: &VelocityPolicy, dir: &Path, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut names = Vec::new();
    for (name, off, len, shape) in policy.blocks() {
        let grid = TensorGrid::from_f64(shape, policy.params()[off..off + len].to_vec())?;
        save_tensor(&grid, dir.join(format!("{name}.gft")))?;
        names.push(name);
    }
    let manifest = PolicyManifest { layer_dims: policy.dims().to_vec(), activation: "tanh".into(), blocks: names, metadata };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))
}

pub fn load_policy(dir: &Path) -> Result<(VelocityPolicy, PolicyManifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let manifest: PolicyManifest =
        serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.activation != "tanh" {
        return Err(PolicyError::Checkpoint(format!("unsupported activation {:?}", manifest.activation)));
    }
    let template = VelocityPolicy::zeros(manifest.layer_dims.clone())?;
    let mut params = Vec::with_capacity(template.num_params());
    for (name, _, len, shape) in template.blocks() {
        let grid = load_tensor(dir.join(format!("{name}.gft")))?;
        if grid.dims() != shape.as_slice() {
            return Err(PolicyError::Checkpoint(format!("{name}.gft has dims {:?}, expected {shape:?}", grid.dims())));
        }
        let values = grid.to_f64_vec();
        debug_assert_eq!(values.len(), len);
        params.extend(values);
    }
    let policy = VelocityPolicy::from_params(manifest.layer_dims.clone(), params)?;
    Ok((policy, manifest))
}
