//! `geoflow`: score videos for geometric consistency, synthesize oracle
//! scenes, pretrain the toy generator, run GRPO, and compute epipolar metrics.
//!
//! Exit codes: 0 on success, 2 for input or configuration errors, 3 for
//! numeric failures or diverged training. `GEOFLOW_THREADS` caps the worker
//! pool (0 or unset means one worker per core).

mod error;
mod evaluate;
mod run;
mod score;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "geoflow", version, about = "Geometry-consistency reward and toy Flow-GRPO tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score a video directory in the adapter layout.
    Score {
        #[arg(long)]
        input: PathBuf,
        /// Reward config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write per-pair Q_geo, EPE, depth-error and weight maps here.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
    },
    /// Render a synthetic scene into the adapter layout.
    Synth {
        /// Scene spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Perturbation setting such as `wobble_px=2`; repeatable.
        #[arg(long, value_name = "KEY=VALUE")]
        perturb: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow-matching pretraining of the toy latent generator.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// GRPO fine-tuning of a pretrained toy generator.
    Grpo {
        /// Trainer config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory written by `pretrain`; the default toy
        /// generator is trained on the fly when omitted.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        template_seed: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Draw an independent initial noise per group member.
        #[arg(long)]
        no_sync_noise: bool,
        #[arg(long)]
        grad_window: Option<usize>,
        #[arg(long)]
        clip_eps: Option<f64>,
    },
    /// Sampson error and dynamic degree of the flows in a video directory.
    Metrics {
        #[arg(long)]
        input: PathBuf,
        /// Frame distance between evaluated pairs.
        #[arg(long, default_value_t = 4)]
        stride: usize,
        /// Pixel spacing of the correspondence grid.
        #[arg(long, default_value_t = 4)]
        grid_step: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let threads = match std::env::var("GEOFLOW_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Input(format!("GEOFLOW_THREADS must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Input(format!("cannot start worker pool: {e}")))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Score { input, config, out, dump_maps } => score::run(&score::ScoreArgs { input, config, out, dump_maps }),
        Command::Synth { spec, perturb, seed, out } => synth::run(&synth::SynthArgs { spec, perturb, seed, out }),
        Command::Pretrain { config, out } => train::pretrain(&train::PretrainArgs { config, out }),
        Command::Grpo { config, out, pretrained, template_seed, seed, iterations, no_sync_noise, grad_window, clip_eps } => {
            train::grpo(&train::GrpoArgs { config, out, pretrained, template_seed, seed, iterations, no_sync_noise, grad_window, clip_eps })
        }
        Command::Metrics { input, stride, grid_step, out } => evaluate::run(&evaluate::MetricsArgs { input, stride, grid_step, out }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
