//! ODE and SDE samplers on a uniform time grid from `t = 1` to `t = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{standard_normal, PolicyError, Result, VelocityField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub noise_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 10, noise_scale: 1.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(PolicyError::Config(format!("steps = {} must be at least 2", self.steps)));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(PolicyError::Config(format!("noise_scale = {} must be finite and >= 0", self.noise_scale)));
        }
        Ok(())
    }

    /// Times `t_K = 1, ..., t_1, t_0 = 0`, descending.
    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.steps).rev().map(|k| k as f64 / self.steps as f64).collect()
    }
}

/// One recorded transition `x_t -> x_{t - dt}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: f64,
    pub dt: f64,
    /// Noise level `sigma_t` used in the drift (before the `sqrt(dt)` factor).
    pub sigma: f64,
    pub x_t: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma_step: f64,
    pub z: Vec<f64>,
    pub x_next: Vec<f64>,
    /// `None` for deterministic steps, which have no density.
    pub logp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub x_next: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub sigma_step: f64,
}

/// `sigma_t = a sqrt(t' / (1 - t'))` evaluated at the interval midpoint `t' = t - dt / 2`.
pub fn sigma_t(a: f64, t: f64, dt: f64) -> f64 {
    let m = t - 0.5 * dt;
    a * (m / (1.0 - m)).sqrt()
}

/// Derivative of the step mean with respect to the velocity (a scalar times identity).
pub fn drift_coefficient(t: f64, dt: f64, sigma: f64) -> f64 {
    -dt * (1.0 + sigma * sigma * (1.0 - t) / (2.0 * t))
}

/// `x - [v + sigma^2 / (2t) (x + (1 - t) v)] dt`.
pub fn drift_mean(x: &[f64], v: &[f64], t: f64, dt: f64, sigma: f64) -> Vec<f64> {
    let k = sigma * sigma / (2.0 * t);
    x.iter().zip(v).map(|(&xi, &vi)| xi - (vi + k * (xi + (1.0 - t) * vi)) * dt).collect()
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(PolicyError::Domain(format!("sde step at t = {t}, need t in (0, 1]")));
    }
    if !(dt > 0.0 && dt <= t) {
        return Err(PolicyError::Domain(format!("dt = {dt} must lie in (0, t]")));
    }
    Ok(())
}

/// One Euler-Maruyama step of the marginal-preserving SDE.
pub fn sde_step(field: &impl VelocityField, x: &[f64], t: f64, dt: f64, a: f64, z: &[f64]) -> Result<StepOutput> {
    check_step(t, dt)?;
    if x.len() != field.dim() || z.len() != x.len() {
        return Err(PolicyError::Shape(format!("x has {}, z has {}, field expects {}", x.len(), z.len(), field.dim())));
    }
    if !x.iter().chain(z).all(|v| v.is_finite()) {
        return Err(PolicyError::Numeric("non-finite state or noise".into()));
    }
    let mut v = vec![0.0; x.len()];
    field.velocity_into(x, t, &mut v);
    if !v.iter().all(|c| c.is_finite()) {
        return Err(PolicyError::Numeric(format!("non-finite velocity at t = {t}")));
    }
    let sigma = sigma_t(a, t, dt);
    let mean = drift_mean(x, &v, t, dt, sigma);
    let sigma_step = sigma * dt.sqrt();
    let x_next = mean.iter().zip(z).map(|(m, zi)| m + sigma_step * zi).collect();
    Ok(StepOutput { x_next, mean, sigma, sigma_step })
}

/// Isotropic Gaussian log-density of `x_next` around `mean`.
pub fn transition_logprob(x_next: &[f64], mean: &[f64], sigma_step: f64) -> Result<f64> {
    if !(sigma_step > 0.0) {
        return Err(PolicyError::Domain(format!("sigma_step = {sigma_step}: deterministic steps have no density")));
    }
    if x_next.len() != mean.len() {
        return Err(PolicyError::Shape(format!("x_next has {}, mean has {}", x_next.len(), mean.len())));
    }
    let d = x_next.len() as f64;
    let s2 = sigma_step * sigma_step;
    let sq: f64 = x_next.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * s2).ln() - sq / (2.0 * s2))
}

/// Runs `K` steps from `eps_init` at `t = 1` down to `t = 0`. Noise is drawn
/// from `rng` only when `noise_scale > 0`.
pub fn rollout(
    field: &impl VelocityField,
    eps_init: &[f64],
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<TrajectoryStep>, Vec<f64>)> {
    config.validate()?;
    let grid = config.time_grid();
    let d = eps_init.len();
    let stochastic = config.noise_scale > 0.0;
    let mut x = eps_init.to_vec();
    let mut steps = Vec::with_capacity(config.steps);
    for w in grid.windows(2) {
        let (t, dt) = (w[0], w[0] - w[1]);
        let z = if stochastic { standard_normal(rng, d) } else { vec![0.0; d] };
        let out = sde_step(field, &x, t, dt, config.noise_scale, &z)?;
        let logp = if out.sigma_step > 0.0 { Some(transition_logprob(&out.x_next, &out.mean, out.sigma_step)?) } else { None };
        steps.push(TrajectoryStep {
            t,
            dt,
            sigma: out.sigma,
            x_t: std::mem::replace(&mut x, out.x_next.clone()),
            mean: out.mean,
            sigma_step: out.sigma_step,
            z,
            x_next: out.x_next,
            logp,
        });
    }
    Ok((steps, x))
}

/// Deterministic Euler sample.
pub fn ode_sample(field: &impl VelocityField, eps_init: &[f64], steps: usize) -> Result<Vec<f64>> {
    let config = SamplerConfig { steps, noise_scale: 0.0 };
    Ok(rollout(field, eps_init, &config, &mut crate::rng::stream(0, &[]))?.1)
}
