use std::fs;
use std::path::{Path, PathBuf};

use geoflow::adapter::{check_stride, read_bundle};
use geoflow::gft::save_tensor;
use geoflow::grid::TensorGrid;
use geoflow::reward::{score_video, RewardConfig};

use crate::error::{CliError, Result};
use crate::run::{read_json, sidecar_manifest, write_json, OutputLock, RunRecord};

pub struct ScoreArgs {
    pub input: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub dump_maps: Option<PathBuf>,
}

pub fn run(args: &ScoreArgs) -> Result<()> {
    let config: RewardConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RewardConfig::default(),
    };
    config.validate()?;
    let out_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = OutputLock::acquire(out_dir)?;
    let mut record = RunRecord::start("score", &config, None);
    record.input(&args.input);
    if let Some(p) = &args.config {
        record.input(p);
    }

    let bundle = read_bundle(&args.input)?;
    check_stride(&bundle, config.pair_stride)?;
    let score = score_video(&bundle.video, &config)?;
    write_json(&args.out, &score.report(&config))?;
    record.output(args.out.clone());

    if let Some(dir) = &args.dump_maps {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (tau, s) in &score.pair_scores {
            let tag = format!("{tau:04}_{:04}", tau + config.pair_stride);
            let m = &s.maps;
            let (h, w) = (m.omega.height(), m.omega.width());
            let weights = TensorGrid::from_f64(vec![h, w], m.weights.clone()).map_err(|e| CliError::Numeric(e.to_string()))?;
            for (name, grid) in [("q_geo", &m.q_geo), ("epe", &m.epe), ("depth_err", &m.depth_err), ("weights", &weights)] {
                let path = dir.join(format!("{name}_{tag}.gft"));
                save_tensor(grid, &path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                record.output(path);
            }
        }
    }
    record.finish(&sidecar_manifest(&args.out))
}
