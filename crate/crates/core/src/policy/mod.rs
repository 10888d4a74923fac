//! Toy rectified-flow generator.
//!
//! The velocity field is a small tanh MLP over `(x, t)` with hand-written
//! backpropagation. Samples run from `t = 1` (noise) to `t = 0` (data) on a
//! uniform grid, either deterministically or with the marginal-preserving SDE
//! whose Gaussian transitions have closed-form log-densities.

mod checkpoint;
mod pretrain;
mod sampler;

pub use checkpoint::{load_policy, save_policy, PolicyManifest};
pub use pretrain::{fm_pretrain, interpolant, PretrainConfig, PretrainReport};
pub use sampler::{
    drift_coefficient, drift_mean, ode_sample, rollout, sde_step, sigma_t, transition_logprob, SamplerConfig, StepOutput,
    TrajectoryStep,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::GridError;
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

/// Anything that maps `(x, t)` to a velocity of the same dimension.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn velocity_into(&self, x: &[f64], t: f64, out: &mut [f64]);
}

/// Optimal velocity for isotropic Gaussian data `N(mean, std^2 I)` under the
/// interpolant `x_t = (1 - t) x_0 + t eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianVelocity {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl VelocityField for GaussianVelocity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let s2 = self.std * self.std;
        let gain = (t - (1.0 - t) * s2) / ((1.0 - t).powi(2) * s2 + t * t);
        for ((o, &xi), &m) in out.iter_mut().zip(x).zip(&self.mean) {
            *o = -m + gain * (xi - (1.0 - t) * m);
        }
    }
}

/// Fully connected tanh network; the last layer is linear. Input is `x`
/// with `t` appended.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityPolicy {
    dims: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl VelocityPolicy {
    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(PolicyError::Shape(format!("layer dims {dims:?} need at least two positive sizes")));
        }
        if dims[0] != dims[dims.len() - 1] + 1 {
            return Err(PolicyError::Shape(format!("input width {} must be output width {} + 1", dims[0], dims[dims.len() - 1])));
        }
        Ok(())
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::check_dims(&dims)?;
        let n = param_count(&dims);
        Ok(VelocityPolicy { dims, params: vec![0.0; n] })
    }

    /// Gaussian initialization with variance `1 / fan_in`; biases start at zero.
    pub fn random(dims: Vec<usize>, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = stream(seed, &[0x1417]);
        let mut off = 0;
        for l in 0..p.dims.len() - 1 {
            let (fan_in, fan_out) = (p.dims[l], p.dims[l + 1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut p.params[off..off + fan_in * fan_out] {
                *v = normal.sample(&mut rng);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(p)
    }

    pub fn from_params(dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        Self::check_dims(&dims)?;
        if params.len() != param_count(&dims) {
            return Err(PolicyError::Shape(format!("{} parameters for dims {dims:?}, expected {}", params.len(), param_count(&dims))));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(VelocityPolicy { dims, params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn data_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    /// `(name, offset, len, shape)` of each weight and bias block.
    pub fn blocks(&self) -> Vec<(String, usize, usize, Vec<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        for l in 0..self.dims.len() - 1 {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            out.push((format!("w{l}"), off, i * o, vec![o, i]));
            off += i * o;
            out.push((format!("b{l}"), off, o, vec![o]));
            off += o;
        }
        out
    }

    /// Forward pass keeping every layer's activations (input first).
    fn forward(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.dims.len());
        let mut input = Vec::with_capacity(self.dims[0]);
        input.extend_from_slice(x);
        input.push(t);
        acts.push(input);
        let last = self.dims.len() - 2;
        let mut off = 0;
        for l in 0..=last {
            let (ni, no) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[off..off + ni * no];
            let b = &self.params[off + ni * no..off + ni * no + no];
            let prev = &acts[l];
            let mut out: Vec<f64> = (0..no)
                .map(|j| b[j] + w[j * ni..(j + 1) * ni].iter().zip(prev).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
            off += ni * no + no;
        }
        acts
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.data_dim() {
            return Err(PolicyError::Shape(format!("x has {} entries, policy expects {}", x.len(), self.data_dim())));
        }
        if !x.iter().all(|v| v.is_finite()) || !t.is_finite() {
            return Err(PolicyError::Numeric("non-finite policy input".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(PolicyError::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        Ok(self.forward(x, t).pop().expect("at least one layer"))
    }

    /// Gradient of `upstream . v(x, t)` with respect to every parameter.
    pub fn velocity_grad(&self, x: &[f64], t: f64, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        if upstream.len() != self.data_dim() {
            return Err(PolicyError::Shape(format!("upstream has {} entries, expected {}", upstream.len(), self.data_dim())));
        }
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_grad(x, t, upstream, &mut grad);
        Ok(grad)
    }

    /// Adds the gradient of `upstream . v(x, t)` into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], t: f64, upstream: &[f64], grad: &mut [f64]) {
        let acts = self.forward(x, t);
        let nl = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(nl);
        let mut off = 0;
        for l in 0..nl {
            offsets.push(off);
            off += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        let mut delta = upstream.to_vec();
        for l in (0..nl).rev() {
            let (ni, no) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for j in 0..no {
                let d = delta[j];
                if d != 0.0 {
                    for (g, &a) in grad[off + j * ni..off + (j + 1) * ni].iter_mut().zip(prev) {
                        *g += d * a;
                    }
                }
                grad[off + ni * no + j] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + ni * no];
                delta = (0..ni)
                    .map(|i| {
                        let back: f64 = (0..no).map(|j| w[j * ni + i] * delta[j]).sum();
                        back * (1.0 - prev[i] * prev[i])
                    })
                    .collect();
            }
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &VelocityPolicy) -> f64 {
        self.params.iter().zip(&other.params).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

impl VelocityField for VelocityPolicy {
    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn velocity_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.forward(x, t).pop().expect("at least one layer"));
    }
}

/// Standard normal vector of length `d`.
pub fn standard_normal(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_network_outputs_zero() {
        let p = VelocityPolicy::zeros(vec![3, 5, 5, 2]).unwrap();
        assert_eq!(p.velocity(&[0.3, -2.0], 0.4).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_hidden_unit_by_hand() {
        // dims (2, 1, 1): v = w1 * tanh(w0x * x + w0t * t + b0) + b1
        let p = VelocityPolicy::from_params(vec![2, 1, 1], vec![0.5, -1.0, 0.25, 2.0, -0.1]).unwrap();
        let (x, t) = (0.8, 0.3);
        let expected = 2.0 * (0.5 * x - 1.0 * t + 0.25f64).tanh() - 0.1;
        assert!((p.velocity(&[x], t).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn input_checks() {
        let p = VelocityPolicy::zeros(vec![2, 3, 1]).unwrap();
        assert!(matches!(p.velocity(&[f64::NAN], 0.5), Err(PolicyError::Numeric(_))));
        assert!(matches!(p.velocity(&[0.0], 1.5), Err(PolicyError::Domain(_))));
        assert!(matches!(p.velocity(&[0.0, 1.0], 0.5), Err(PolicyError::Shape(_))));
        assert!(VelocityPolicy::zeros(vec![3, 4, 1]).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = VelocityPolicy::random(vec![5, 8, 8, 4], 1).unwrap();
        let g = p.velocity_grad(&[0.1, 0.2, 0.3, 0.4], 0.5, &[0.0; 4]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_velocity_standard_normal() {
        let g = GaussianVelocity { mean: vec![0.0], std: 1.0 };
        for &(x, t) in &[(0.7, 0.2), (-1.3, 0.9), (2.0, 0.5)] {
            let mut v = [0.0];
            g.velocity_into(&[x], t, &mut v);
            let expected = (2.0 * t - 1.0) * x / ((1.0 - t) * (1.0 - t) + t * t);
            assert!((v[0] - expected).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn gradient_is_linear_in_upstream(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let p = VelocityPolicy::random(vec![3, 6, 6, 2], seed).unwrap();
            let (x, t) = ([0.3, -0.7], 0.6);
            let (u1, u2) = ([1.0, -0.5], [0.25, 2.0]);
            let combo = [a * u1[0] + b * u2[0], a * u1[1] + b * u2[1]];
            let g = p.velocity_grad(&x, t, &combo).unwrap();
            let g1 = p.velocity_grad(&x, t, &u1).unwrap();
            let g2 = p.velocity_grad(&x, t, &u2).unwrap();
            for i in 0..g.len() {
                prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn velocity_is_continuous_in_time(seed in 0u64..1000, x in -2.0f64..2.0, t in 0.0f64..0.99) {
            let p = VelocityPolicy::random(vec![2, 8, 8, 1], seed).unwrap();
            let a = p.velocity(&[x], t).unwrap()[0];
            let b = p.velocity(&[x], t + 1e-8).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + p.param_norm()));
        }
    }
}
