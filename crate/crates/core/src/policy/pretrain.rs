//! Flow-matching pretraining with minibatch Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{standard_normal, PolicyError, Result, VelocityPolicy};
use crate::rng::stream;

const DIVERGENCE: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    /// Final learning rate as a fraction of `lr`; decay is linear.
    pub lr_final_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { iterations: 3000, lr: 5e-3, batch: 256, lr_final_fraction: 0.05, seed: 0 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(PolicyError::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PolicyError::Config(format!("lr = {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(PolicyError::Config(format!("lr_final_fraction = {} outside [0, 1]", self.lr_final_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub policy: VelocityPolicy,
    /// Minibatch loss per iteration.
    pub losses: Vec<f64>,
}

/// `x_t = (1 - t) x_0 + t eps`.
pub fn interpolant(x0: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(eps).map(|(&a, &e)| (1.0 - t) * a + t * e).collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Minimizes `E || v(x_t, t) - (eps - x_0) ||^2` with `t ~ U[0, 1]`.
/// `data` draws one `x_0` per call from the supplied generator.
pub fn fm_pretrain<F>(policy: &VelocityPolicy, mut data: F, config: &PretrainConfig) -> Result<PretrainReport>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    config.validate()?;
    let mut policy = policy.clone();
    let d = policy.data_dim();
    let mut rng = stream(config.seed, &[0xF10E]);
    let mut adam = Adam::new(policy.num_params());
    let mut losses = Vec::with_capacity(config.iterations);
    let mut grad = vec![0.0; policy.num_params()];
    for it in 0..config.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let scale = 1.0 / config.batch as f64;
        for _ in 0..config.batch {
            let x0 = data(&mut rng);
            if x0.len() != d {
                return Err(PolicyError::Shape(format!("data sample has {} entries, policy expects {d}", x0.len())));
            }
            let eps = standard_normal(&mut rng, d);
            let t: f64 = rng.random();
            let xt = interpolant(&x0, &eps, t);
            let v = policy.velocity(&xt, t)?;
            let resid: Vec<f64> = v.iter().zip(eps.iter().zip(&x0)).map(|(vi, (e, a))| vi - (e - a)).collect();
            loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
            let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
            policy.accumulate_grad(&xt, t, &upstream, &mut grad);
        }
        if !loss.is_finite() || loss > DIVERGENCE {
            return Err(PolicyError::Training(format!("flow-matching loss {loss} at iteration {it}")));
        }
        losses.push(loss);
        let frac = if config.iterations > 1 { it as f64 / (config.iterations - 1) as f64 } else { 0.0 };
        let lr = config.lr * (1.0 - frac * (1.0 - config.lr_final_fraction));
        adam.update(policy.params_mut(), &grad, lr);
    }
    Ok(PretrainReport { policy, losses })
}
