//! Group-relative policy optimization of the toy flow policy against the
//! pair reward of decoded synthetic scenes.
//!
//! Each iteration draws groups of `G` SDE rollouts under a frozen copy of the
//! live policy, standardizes their terminal rewards within the group, and
//! takes one gradient step on the clipped surrogate restricted to the first
//! `M` denoising steps, regularized by a Gaussian KL term against the
//! pretrained reference.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    drift_coefficient, drift_mean, fm_pretrain, rollout, standard_normal, transition_logprob, PolicyError, SamplerConfig,
    PretrainConfig, PretrainReport, TrajectoryStep, VelocityPolicy,
};
use crate::reward::{score_pair, FeatureSource, RewardConfig, RewardError};
use crate::rng::stream;
use crate::synth::{decode_latent, SceneSpec, SynthError, LATENT_DIM};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("degenerate decode of latent {latent:?}: {source}")]
    DegenerateDecode {
        latent: Vec<f64>,
        #[source]
        source: RewardError,
    },
    #[error(transparent)]
    Reward(#[from] RewardError),
    /// Training produced non-finite values; `last_good` holds the parameters
    /// from before the update that caused them.
    #[error("non-finite {stage} at iteration {iter}")]
    NonFinite { iter: usize, stage: &'static str, last_good: Box<VelocityPolicy> },
}

pub type Result<T, E = GrpoError> = std::result::Result<T, E>;

const STREAM_EPS: u64 = 0xE95;
const STREAM_NOISE: u64 = 0x5DE;
const ARMIJO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub steps: usize,
    pub grad_window: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Initial step length along the negative gradient; halved until the
    /// batch loss decreases sufficiently.
    pub lr: f64,
    pub max_backtracks: usize,
    pub ema_decay: f64,
    pub iterations: usize,
    pub seed: u64,
    pub sync_noise: bool,
    pub noise_scale: f64,
    pub groups_per_iter: usize,
    /// Seed of the perturbation patterns used when decoding latents.
    pub decode_seed: u64,
    pub reward: RewardConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 4,
            steps: 10,
            grad_window: 5,
            clip_eps: 1e-3,
            kl_beta: 0.004,
            lr: 1.0,
            max_backtracks: 30,
            ema_decay: 0.99,
            iterations: 200,
            seed: 0,
            sync_noise: true,
            noise_scale: 1.0,
            groups_per_iter: 8,
            decode_seed: 0,
            reward: RewardConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GrpoError::Config(m));
        if self.steps < 2 {
            return fail(format!("steps = {} must be at least 2", self.steps));
        }
        if self.grad_window == 0 {
            return fail("grad_window must be at least 1".into());
        }
        if self.grad_window > self.steps {
            return fail(format!("grad_window exceeds steps ({} > {})", self.grad_window, self.steps));
        }
        if self.group_size < 2 {
            return fail(format!("group_size = {} must be at least 2", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return fail(format!("clip_eps = {} must be positive", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail(format!("kl_beta = {} must be finite and >= 0", self.kl_beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr = {} must be finite and >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay = {} outside [0, 1)", self.ema_decay));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale = {} must be positive: the surrogate needs stochastic steps", self.noise_scale));
        }
        if self.groups_per_iter == 0 {
            return fail("groups_per_iter must be at least 1".into());
        }
        self.reward.validate()?;
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps, noise_scale: self.noise_scale }
    }
}

/// The reward of a latent: decode it into a rendered pair and score the pair.
#[derive(Clone, Debug)]
pub struct LatentReward {
    pub template: SceneSpec,
    pub decode_seed: u64,
    pub config: RewardConfig,
}

impl LatentReward {
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        let pair = decode_latent(z, &self.template, self.decode_seed)?;
        match score_pair(&pair.inputs(), FeatureSource::Reference, &self.config) {
            Ok(s) => Ok(s.r_pair),
            Err(source @ RewardError::EmptyMask(_)) => Err(GrpoError::DegenerateDecode { latent: z.to_vec(), source }),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Isotropic Gaussian mixture over latents used as flow-matching data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPrior {
    pub components: Vec<PriorComponent>,
}

impl Default for LatentPrior {
    /// Half consistent scenes (small perturbations, modest camera motion),
    /// half visibly perturbed ones (about 2.4 px wobble, 1.2 px drift).
    fn default() -> Self {
        LatentPrior {
            components: vec![
                PriorComponent { weight: 0.5, mean: vec![-3.0, -3.0, -3.0, -1.0], std: 0.5 },
                PriorComponent { weight: 0.5, mean: vec![0.0; 4], std: 0.5 },
            ],
        }
    }
}

impl LatentPrior {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(GrpoError::Config("latent prior has no components".into()));
        }
        for c in &self.components {
            if c.mean.len() != LATENT_DIM || !(c.std > 0.0) || !(c.weight > 0.0) {
                return Err(GrpoError::Config(format!(
                    "prior component needs a {LATENT_DIM}-d mean, positive std and positive weight: {c:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            if u < c.weight {
                chosen = c;
                break;
            }
            u -= c.weight;
        }
        let eps = standard_normal(rng, chosen.mean.len());
        chosen.mean.iter().zip(eps).map(|(m, e)| m + chosen.std * e).collect()
    }
}

/// Flow-matching pretraining of the toy latent generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyPretrainConfig {
    pub hidden: usize,
    pub init_seed: u64,
    pub prior: LatentPrior,
    pub training: PretrainConfig,
}

impl Default for ToyPretrainConfig {
    fn default() -> Self {
        ToyPretrainConfig { hidden: 32, init_seed: 0, prior: LatentPrior::default(), training: PretrainConfig::default() }
    }
}

impl ToyPretrainConfig {
    pub fn run(&self) -> Result<PretrainReport> {
        self.prior.validate()?;
        if self.hidden == 0 {
            return Err(GrpoError::Config("hidden width must be positive".into()));
        }
        let init = VelocityPolicy::random(vec![LATENT_DIM + 1, self.hidden, self.hidden, LATENT_DIM], self.init_seed)?;
        Ok(fm_pretrain(&init, |rng| self.prior.sample(rng), &self.training)?)
    }
}

/// G rollouts from one (possibly shared) initialization, frozen under the
/// behavior policy.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub eps_init: Vec<Vec<f64>>,
    pub trajectories: Vec<Vec<TrajectoryStep>>,
    pub terminals: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// `(r - mean) / std` with the population std; all zeros when `std < 1e-9`.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if !(std >= 1e-9) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Samples group `(iter, group)` under `behavior`. The random streams depend
/// only on `(seed, iter, group, member)`.
pub fn sample_group(
    behavior: &VelocityPolicy,
    reward: &LatentReward,
    config: &TrainerConfig,
    iter: u64,
    group: u64,
) -> Result<GroupRollout> {
    let d = behavior.data_dim();
    let g = config.group_size;
    let shared = standard_normal(&mut stream(config.seed, &[STREAM_EPS, iter, group]), d);
    let eps_init: Vec<Vec<f64>> = (0..g as u64)
        .map(|m| {
            if config.sync_noise {
                shared.clone()
            } else {
                standard_normal(&mut stream(config.seed, &[STREAM_EPS, iter, group, m]), d)
            }
        })
        .collect();
    let sampler = config.sampler();
    let mut trajectories = Vec::with_capacity(g);
    let mut terminals = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    for (m, eps) in eps_init.iter().enumerate() {
        let mut rng = stream(config.seed, &[STREAM_NOISE, iter, group, m as u64]);
        let (steps, x0) = rollout(behavior, eps, &sampler, &mut rng)?;
        rewards.push(reward.score(&x0)?);
        trajectories.push(steps);
        terminals.push(x0);
    }
    let advantages = group_advantages(&rewards);
    Ok(GroupRollout { eps_init, trajectories, terminals, rewards, advantages })
}

fn theta_mean(theta: &VelocityPolicy, step: &TrajectoryStep) -> Result<Vec<f64>> {
    let v = theta.velocity(&step.x_t, step.t)?;
    Ok(drift_mean(&step.x_t, &v, step.t, step.dt, step.sigma))
}

fn behavior_logp(step: &TrajectoryStep) -> Result<f64> {
    step.logp.ok_or_else(|| {
        PolicyError::Domain(format!("step at t = {} is deterministic (sigma_step = {})", step.t, step.sigma_step)).into()
    })
}

/// `pi_theta(x_next | x_t) / pi_old(x_next | x_t)` for a recorded step.
pub fn importance_ratio(theta: &VelocityPolicy, step: &TrajectoryStep) -> Result<f64> {
    let old = behavior_logp(step)?;
    let mean = theta_mean(theta, step)?;
    Ok((transition_logprob(&step.x_next, &mean, step.sigma_step)? - old).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateEval {
    /// `-objective + kl_beta * kl`.
    pub loss: f64,
    /// Mean clipped surrogate over window terms.
    pub objective: f64,
    /// Window mean of the per-step Gaussian KL.
    pub kl: f64,
    /// Per-trajectory sum of window KL, averaged over trajectories.
    pub kl_traj: f64,
    pub clip_fraction: f64,
    /// Empty unless requested.
    pub grad: Vec<f64>,
}

struct Partial {
    objective: f64,
    kl: f64,
    clipped: usize,
    grad: Vec<f64>,
}

fn group_terms(
    theta: &VelocityPolicy,
    reference: &VelocityPolicy,
    group: &GroupRollout,
    config: &TrainerConfig,
    n_terms: f64,
    with_grad: bool,
) -> Result<Partial> {
    let eps = config.clip_eps;
    let mut out = Partial { objective: 0.0, kl: 0.0, clipped: 0, grad: if with_grad { vec![0.0; theta.num_params()] } else { Vec::new() } };
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        for step in traj.iter().take(config.grad_window) {
            let old = behavior_logp(step)?;
            let mu = theta_mean(theta, step)?;
            let s2 = step.sigma_step * step.sigma_step;
            let ratio = (transition_logprob(&step.x_next, &mu, step.sigma_step)? - old).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            out.objective += unclipped.min(clipped);
            if ratio < 1.0 - eps || ratio > 1.0 + eps {
                out.clipped += 1;
            }
            let mu_ref = theta_mean(reference, step)?;
            out.kl += mu.iter().zip(&mu_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * s2);
            if with_grad {
                let c = drift_coefficient(step.t, step.dt, step.sigma);
                let pg = if unclipped <= clipped { -adv * ratio / n_terms } else { 0.0 };
                let kl = config.kl_beta / n_terms;
                let upstream: Vec<f64> = (0..mu.len())
                    .map(|j| c / s2 * (pg * (step.x_next[j] - mu[j]) + kl * (mu[j] - mu_ref[j])))
                    .collect();
                theta.accumulate_grad(&step.x_t, step.t, &upstream, &mut out.grad);
            }
        }
    }
    Ok(out)
}

/// Clipped surrogate over the first `grad_window` steps of every trajectory,
/// with the Gaussian KL penalty against `reference`.
pub fn surrogate_loss(
    theta: &VelocityPolicy,
    reference: &VelocityPolicy,
    groups: &[GroupRollout],
    config: &TrainerConfig,
    with_grad: bool,
) -> Result<SurrogateEval> {
    let n_traj: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    let n_terms: usize =
        groups.iter().flat_map(|g| &g.trajectories).map(|t| t.len().min(config.grad_window)).sum();
    if n_terms == 0 {
        return Err(GrpoError::Config("no trajectory steps inside the gradient window".into()));
    }
    let nt = n_terms as f64;
    let parts = groups
        .par_iter()
        .map(|g| group_terms(theta, reference, g, config, nt, with_grad))
        .collect::<Result<Vec<_>>>()?;
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0;
    let mut grad = if with_grad { vec![0.0; theta.num_params()] } else { Vec::new() };
    for p in parts {
        objective += p.objective;
        kl += p.kl;
        clipped += p.clipped;
        for (g, v) in grad.iter_mut().zip(&p.grad) {
            *g += v;
        }
    }
    let objective = objective / nt;
    let kl_mean = kl / nt;
    Ok(SurrogateEval {
        loss: -objective + config.kl_beta * kl_mean,
        objective,
        kl: kl_mean,
        kl_traj: kl / n_traj as f64,
        clip_fraction: clipped as f64 / nt,
        grad,
    })
}

/// `ema <- decay * ema + (1 - decay) * theta`, written as an increment so a
/// converged average stays bit-identical.
pub fn ema_update(ema: &mut VelocityPolicy, theta: &VelocityPolicy, decay: f64) {
    for (e, t) in ema.params_mut().iter_mut().zip(theta.params()) {
        *e += (1.0 - decay) * (t - *e);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    pub theta: VelocityPolicy,
    pub theta_old: VelocityPolicy,
    pub theta_ref: VelocityPolicy,
    pub theta_ema: VelocityPolicy,
}

impl PolicySnapshot {
    pub fn new(pretrained: &VelocityPolicy) -> Self {
        PolicySnapshot {
            theta: pretrained.clone(),
            theta_old: pretrained.clone(),
            theta_ref: pretrained.clone(),
            theta_ema: pretrained.clone(),
        }
    }
}

/// One line of the training metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub kl_traj: f64,
    pub loss: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub snapshot: PolicySnapshot,
    pub metrics: Vec<IterMetrics>,
}

fn sample_iteration(
    behavior: &VelocityPolicy,
    reward: &LatentReward,
    config: &TrainerConfig,
    iter: u64,
) -> Result<Vec<GroupRollout>> {
    (0..config.groups_per_iter as u64).into_par_iter().map(|g| sample_group(behavior, reward, config, iter, g)).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

/// Runs the optimization loop. `on_iter` sees each metric line as it is produced.
pub fn train(
    config: &TrainerConfig,
    pretrained: &VelocityPolicy,
    template: &SceneSpec,
    mut on_iter: impl FnMut(&IterMetrics),
) -> Result<TrainRun> {
    config.validate()?;
    if pretrained.data_dim() != LATENT_DIM {
        return Err(GrpoError::Config(format!("policy dimension {} differs from latent dimension {LATENT_DIM}", pretrained.data_dim())));
    }
    let reward = LatentReward { template: template.clone(), decode_seed: config.decode_seed, config: config.reward.clone() };
    let mut snap = PolicySnapshot::new(pretrained);
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut previous = pretrained.clone();
    for iter in 0..config.iterations {
        snap.theta_old = snap.theta.clone();
        let groups = match sample_iteration(&snap.theta_old, &reward, config, iter as u64) {
            Err(GrpoError::Policy(PolicyError::Numeric(_)) | GrpoError::Reward(RewardError::NonFinite { .. })) => {
                return Err(GrpoError::NonFinite { iter, stage: "rollout", last_good: Box::new(previous) });
            }
            other => other?,
        };
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let (reward_mean, reward_std) = mean_std(&rewards);

        let here = surrogate_loss(&snap.theta, &snap.theta_ref, &groups, config, true)?;
        if !here.loss.is_finite() || here.grad.iter().any(|g| !g.is_finite()) {
            return Err(GrpoError::NonFinite { iter, stage: "surrogate loss", last_good: Box::new(snap.theta.clone()) });
        }
        let g2: f64 = here.grad.iter().map(|g| g * g).sum();
        let mut accepted = here.clone();
        let mut step_size = 0.0;
        if config.lr > 0.0 && g2 > 0.0 {
            let mut alpha = config.lr;
            for _ in 0..=config.max_backtracks {
                let mut trial = snap.theta.clone();
                for (p, g) in trial.params_mut().iter_mut().zip(&here.grad) {
                    *p -= alpha * g;
                }
                let eval = surrogate_loss(&trial, &snap.theta_ref, &groups, config, false)?;
                if eval.loss.is_finite() && eval.loss <= here.loss - ARMIJO * alpha * g2 {
                    snap.theta = trial;
                    accepted = eval;
                    step_size = alpha;
                    break;
                }
                alpha *= 0.5;
            }
        }
        ema_update(&mut snap.theta_ema, &snap.theta, config.ema_decay);
        previous = snap.theta_old.clone();
        let line = IterMetrics {
            iter,
            reward_mean,
            reward_std,
            kl: accepted.kl,
            clip_fraction: accepted.clip_fraction,
            grad_norm: g2.sqrt(),
            kl_traj: accepted.kl_traj,
            loss: accepted.loss,
            step_size,
        };
        on_iter(&line);
        metrics.push(line);
    }
    Ok(TrainRun { snapshot: snap, metrics })
}

/// Mean reward of `n` independent SDE samples from `policy`.
pub fn evaluate_policy(
    policy: &VelocityPolicy,
    reward: &LatentReward,
    sampler: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let d = policy.data_dim();
    let scores = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let eps = standard_normal(&mut stream(seed, &[STREAM_EPS, i]), d);
            let (_, x0) = rollout(policy, &eps, sampler, &mut stream(seed, &[STREAM_NOISE, i]))?;
            reward.score(&x0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Best reward over a regular grid of `points` values per axis on `[lo, hi]^4`.
pub fn grid_search_optimum(reward: &LatentReward, lo: f64, hi: f64, points: usize) -> Result<(Vec<f64>, f64)> {
    if points < 2 || !(hi > lo) {
        return Err(GrpoError::Config(format!("grid needs >= 2 points on a non-empty interval, got {points} on [{lo}, {hi}]")));
    }
    let axis: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let total = points.pow(LATENT_DIM as u32);
    let scored = (0..total)
        .into_par_iter()
        .map(|mut k| {
            let mut z = [0.0; LATENT_DIM];
            for c in z.iter_mut() {
                *c = axis[k % points];
                k /= points;
            }
            reward.score(&z).map(|r| (z.to_vec(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    // first maximum in enumeration order keeps the result independent of scheduling
    let mut best = scored[0].clone();
    for s in scored.into_iter().skip(1) {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(best)
}
