use std::path::PathBuf;

use geoflow::adapter::{frame_count, read_cameras, read_flows, read_masks};
use geoflow::metrics::{dynamic_degree, eight_point, sample_correspondences, sampson_error, MetricsError};
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::run::{sidecar_manifest, write_json, OutputLock, RunRecord};

pub struct MetricsArgs {
    pub input: PathBuf,
    pub stride: usize,
    pub grid_step: usize,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct MetricsConfig {
    stride: usize,
    grid_step: usize,
}

pub fn run(args: &MetricsArgs) -> Result<()> {
    let config = MetricsConfig { stride: args.stride, grid_step: args.grid_step };
    if args.stride == 0 || args.grid_step == 0 {
        return Err(CliError::Input("--stride and --grid-step must be at least 1".into()));
    }
    let n = frame_count(&args.input)?;
    if args.stride > n.saturating_sub(1) {
        return Err(CliError::Input(format!("stride {} needs more than {n} frames", args.stride)));
    }
    let out_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    let _lock = OutputLock::acquire(out_dir)?;
    let mut record = RunRecord::start("metrics", &config, None);
    record.input(&args.input);

    let flows = read_flows(&args.input)?;
    let masks = read_masks(&args.input, n)?;
    let mut used = Vec::new();
    let (mut errors, mut pairs, mut skipped) = (Vec::new(), 0usize, 0usize);
    let mut warnings = Vec::new();
    for a in 0..n - args.stride {
        let b = a + args.stride;
        let (fwd, _) = flows
            .get(&(a, b))
            .ok_or_else(|| CliError::Input(format!("missing input: flow_fwd/{a:04}_{b:04}.gft")))?;
        used.push(fwd);
        // pixels of frame a that belong to the static background
        let mask = masks.as_ref().map(|m| &m[a]);
        let estimate = sample_correspondences(fwd, args.grid_step, mask).and_then(|c| Ok((eight_point(&c)?, c)));
        match estimate {
            Ok((f, corr)) => {
                let report = sampson_error(&f, &corr)?;
                pairs += corr.len();
                skipped += report.skipped;
                errors.extend(report.errors);
            }
            Err(e @ (MetricsError::Degenerate(_) | MetricsError::Insufficient(_))) => warnings.push(format!("pair ({a}, {b}): {e}")),
            Err(e) => return Err(e.into()),
        }
    }
    let sampson_mean = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
    let mut report = json!({
        "sampson_mean": sampson_mean,
        "pairs": pairs,
        "skipped": skipped,
        "dynamic_degree": dynamic_degree(&used)?,
        "stride": args.stride,
        "grid_step": args.grid_step,
    });
    // scores are in raw pixels; intrinsics let consumers normalize them
    if args.input.join("cameras.json").is_file() {
        let cams = read_cameras(&args.input)?;
        report["intrinsics"] = json!(cams.frames.iter().map(|c| c.intrinsics).collect::<Vec<_>>());
    }
    if !warnings.is_empty() {
        report["warning"] = json!(warnings.join("; "));
    }
    write_json(&args.out, &report)?;
    record.output(args.out.clone());
    record.finish(&sidecar_manifest(&args.out))
}
