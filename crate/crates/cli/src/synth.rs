use std::path::PathBuf;

use geoflow::adapter::write_bundle;
use geoflow::synth::{render_video, PerturbationSpec, SceneSpec};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::run::{read_json, write_json, OutputLock, RunRecord, MANIFEST};

pub struct SynthArgs {
    pub spec: PathBuf,
    pub perturb: Vec<String>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SynthConfig<'a> {
    scene: &'a SceneSpec,
    perturbation: &'a PerturbationSpec,
    seed: u64,
}

pub fn parse_perturbations(pairs: &[String]) -> Result<PerturbationSpec> {
    let mut p = PerturbationSpec::default();
    for pair in pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("--perturb expects key=value, got {pair:?}")))?;
        p.set(k.trim(), v.trim())?;
    }
    Ok(p)
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let spec: SceneSpec = read_json(&args.spec)?;
    spec.validate()?;
    let perturbation = parse_perturbations(&args.perturb)?;
    let _lock = OutputLock::acquire(&args.out)?;
    let mut record = RunRecord::start("synth", &SynthConfig { scene: &spec, perturbation: &perturbation, seed: args.seed }, Some(args.seed));
    record.input(&args.spec);

    let bundle = render_video(&spec, &perturbation, args.seed)?;
    record.outputs(write_bundle(&bundle, &args.out)?);
    let applied = args.out.join("perturbation.json");
    write_json(&applied, &perturbation)?;
    record.output(applied);
    record.finish(&args.out.join(MANIFEST))
}
