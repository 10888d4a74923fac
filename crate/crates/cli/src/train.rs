use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use geoflow::grpo::{train, GrpoError, TrainerConfig, ToyPretrainConfig};
use geoflow::policy::{load_policy, save_policy, VelocityPolicy};
use geoflow::synth::SceneSpec;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::run::{read_json, write_json, OutputLock, RunRecord, MANIFEST};

pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

pub struct GrpoArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub pretrained: Option<PathBuf>,
    pub template_seed: u64,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub no_sync_noise: bool,
    pub grad_window: Option<usize>,
    pub clip_eps: Option<f64>,
}

/// JSON-lines writer that keeps the first I/O error for later.
struct LineSink {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl LineSink {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(LineSink { path, out: BufWriter::new(file), error: None })
    }

    fn push<T: Serialize>(&mut self, value: &T) {
        if self.error.is_none() {
            let line = serde_json::to_string(value).expect("metric lines serialize");
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn close(mut self) -> Result<PathBuf> {
        if let Some(e) = self.error.take() {
            return Err(CliError::io(&self.path, e));
        }
        self.out.flush().map_err(|e| CliError::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn save(policy: &VelocityPolicy, dir: &Path, metadata: serde_json::Value, record: &mut RunRecord) -> Result<()> {
    save_policy(policy, dir, metadata)?;
    let mut blocks: Vec<PathBuf> = policy.blocks().into_iter().map(|(name, ..)| dir.join(format!("{name}.gft"))).collect();
    blocks.push(dir.join(MANIFEST));
    record.outputs(blocks);
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let config: ToyPretrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ToyPretrainConfig::default(),
    };
    let _lock = OutputLock::acquire(&args.out)?;
    let mut record = RunRecord::start("pretrain", &config, Some(config.training.seed));
    if let Some(p) = &args.config {
        record.input(p);
    }
    let resolved = args.out.join("config.json");
    write_json(&resolved, &config)?;
    record.output(resolved);

    let report = config.run()?;
    let mut sink = LineSink::create(args.out.join("losses.jsonl"))?;
    for (iter, loss) in report.losses.iter().enumerate() {
        sink.push(&json!({"iter": iter, "loss": loss}));
    }
    record.output(sink.close()?);
    let metadata = json!({
        "command": "pretrain",
        "iterations": config.training.iterations,
        "final_loss": report.losses.last(),
    });
    save(&report.policy, &args.out.join("policy"), metadata, &mut record)?;
    record.finish(&args.out.join(MANIFEST))
}

#[derive(Serialize)]
struct GrpoRunConfig<'a> {
    trainer: &'a TrainerConfig,
    template_seed: u64,
    pretrained: Option<String>,
}

fn trainer_config(args: &GrpoArgs) -> Result<TrainerConfig> {
    let mut config: TrainerConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainerConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.iterations {
        config.iterations = n;
    }
    if args.no_sync_noise {
        config.sync_noise = false;
    }
    if let Some(m) = args.grad_window {
        config.grad_window = m;
    }
    if let Some(c) = args.clip_eps {
        config.clip_eps = c;
    }
    config.validate()?;
    Ok(config)
}

pub fn grpo(args: &GrpoArgs) -> Result<()> {
    let config = trainer_config(args)?;
    let pretrained = match &args.pretrained {
        Some(dir) => load_policy(dir)?.0,
        None => {
            eprintln!("no --pretrained checkpoint given, pretraining the default toy generator");
            ToyPretrainConfig::default().run()?.policy
        }
    };
    let _lock = OutputLock::acquire(&args.out)?;
    let run_config = GrpoRunConfig {
        trainer: &config,
        template_seed: args.template_seed,
        pretrained: args.pretrained.as_ref().map(|p| p.display().to_string()),
    };
    let mut record = RunRecord::start("grpo", &run_config, Some(config.seed));
    for p in [&args.config, &args.pretrained].into_iter().flatten() {
        record.input(p);
    }
    let resolved = args.out.join("config.json");
    write_json(&resolved, &config)?;
    record.output(resolved);
    let flags = args.out.join("ablation.json");
    write_json(
        &flags,
        &json!({"sync_noise": config.sync_noise, "grad_window": config.grad_window, "steps": config.steps, "clip_eps": config.clip_eps}),
    )?;
    record.output(flags);

    let template = SceneSpec::latent_template(args.template_seed);
    let mut sink = LineSink::create(args.out.join("metrics.jsonl"))?;
    let result = train(&config, &pretrained, &template, |line| {
        sink.push(line);
        if line.iter % 20 == 0 || line.iter + 1 == config.iterations {
            eprintln!("iter {:4}  reward {:.4e}  kl {:.3e}  clip {:.3}", line.iter, line.reward_mean, line.kl, line.clip_fraction);
        }
    });
    record.output(sink.close()?);
    let meta = |kind: &str| json!({"command": "grpo", "policy": kind, "iterations": config.iterations, "seed": config.seed});
    match result {
        Ok(run) => {
            save(&run.snapshot.theta, &args.out.join("policy"), meta("final"), &mut record)?;
            save(&run.snapshot.theta_ema, &args.out.join("policy_ema"), meta("ema"), &mut record)?;
            record.finish(&args.out.join(MANIFEST))
        }
        Err(GrpoError::NonFinite { iter, stage, last_good }) => {
            let mut m = meta("last_good");
            m["failed_at_iter"] = json!(iter);
            save(&last_good, &args.out.join("policy"), m, &mut record)?;
            record.finish(&args.out.join(MANIFEST))?;
            Err(CliError::Numeric(format!("non-finite {stage} at iteration {iter}; last good policy kept in {}", args.out.join("policy").display())))
        }
        Err(e) => Err(e.into()),
    }
}
