use geoflow::policy::{
    fm_pretrain, rollout, GaussianVelocity, PretrainConfig, SamplerConfig, VelocityPolicy,
};
use geoflow::rng::stream;
use rand::Rng;
use rand_distr::StandardNormal;

fn fd_relative_error(policy: &VelocityPolicy, x: &[f64], t: f64, upstream: &[f64]) -> f64 {
    let g = policy.velocity_grad(x, t, upstream).unwrap();
    let h = 1e-6;
    let objective = |p: &VelocityPolicy| -> f64 {
        p.velocity(x, t).unwrap().iter().zip(upstream).map(|(v, u)| v * u).sum()
    };
    let mut worst = 0.0f64;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for (i, gi) in g.iter().enumerate() {
        let mut plus = policy.clone();
        plus.params_mut()[i] += h;
        let mut minus = policy.clone();
        minus.params_mut()[i] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        worst = worst.max((fd - gi).abs() / scale);
    }
    worst
}

#[test]
fn gradient_matches_central_differences() {
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let mut rng = stream(draw, &[55]);
        let policy = VelocityPolicy::random(vec![3, 6, 6, 2], draw).unwrap();
        let x: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let t: f64 = rng.random();
        let upstream: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        worst = worst.max(fd_relative_error(&policy, &x, t, &upstream));
    }
    assert!(worst < 1e-7, "max relative error {worst:e}");
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn ks_statistic_sanity() {
    assert_eq!(ks_statistic(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]), 0.0);
    assert_eq!(ks_statistic(vec![0.0, 1.0], vec![2.0, 3.0]), 1.0);
}

#[test]
fn sde_preserves_ode_marginal() {
    let field = GaussianVelocity { mean: vec![0.0], std: 1.0 };
    let n = 20_000;
    let ode_cfg = SamplerConfig { steps: 200, noise_scale: 0.0 };
    let sde_cfg = SamplerConfig { steps: 200, noise_scale: 0.3 };
    let mut ode = Vec::with_capacity(n);
    let mut sde = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let eps_a: f64 = stream(1, &[i]).sample(StandardNormal);
        let eps_b: f64 = stream(2, &[i]).sample(StandardNormal);
        ode.push(rollout(&field, &[eps_a], &ode_cfg, &mut stream(3, &[i])).unwrap().1[0]);
        sde.push(rollout(&field, &[eps_b], &sde_cfg, &mut stream(4, &[i])).unwrap().1[0]);
    }
    let d = ks_statistic(ode, sde);
    assert!(d < 0.02, "KS statistic {d}");
}

fn gaussian_pretrain() -> (VelocityPolicy, Vec<f64>) {
    let init = VelocityPolicy::random(vec![2, 32, 32, 1], 7).unwrap();
    let cfg = PretrainConfig { iterations: 2000, lr: 5e-3, batch: 256, lr_final_fraction: 0.02, seed: 11 };
    let report = fm_pretrain(&init, |rng| vec![rng.sample(StandardNormal)], &cfg).unwrap();
    (report.policy, report.losses)
}

#[test]
fn pretraining_recovers_gaussian_velocity() {
    let (policy, losses) = gaussian_pretrain();
    let mut se = 0.0;
    let mut count = 0;
    for i in 0..=20 {
        for j in 0..=20 {
            let x = -1.0 + 2.0 * i as f64 / 20.0;
            let t = j as f64 / 20.0;
            let exact = (2.0 * t - 1.0) * x / ((1.0 - t).powi(2) + t * t);
            se += (policy.velocity(&[x], t).unwrap()[0] - exact).powi(2);
            count += 1;
        }
    }
    let mse = se / count as f64;
    assert!(mse < 0.01, "mse {mse}");

    // block means of 100 steps; later blocks may only rise by sampling noise
    let blocks: Vec<(f64, f64)> = losses
        .chunks(100)
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
            (m, (var / c.len() as f64).sqrt())
        })
        .collect();
    for w in blocks.windows(2) {
        let (prev, next) = (w[0], w[1]);
        let tol = 3.0 * (prev.1 * prev.1 + next.1 * next.1).sqrt();
        assert!(next.0 <= prev.0 + tol, "moving average rose: {blocks:?}");
    }
    assert!(blocks[blocks.len() - 1].0 < blocks[0].0);
}
