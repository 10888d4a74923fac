use geoflow::grpo::{
    group_advantages, importance_ratio, sample_group, surrogate_loss, train, GroupRollout, ToyPretrainConfig, LatentReward, TrainerConfig,
};
use geoflow::policy::{drift_coefficient, drift_mean, transition_logprob, TrajectoryStep, VelocityPolicy};
use geoflow::synth::SceneSpec;
use proptest::prelude::*;

fn small_policy(seed: u64) -> VelocityPolicy {
    VelocityPolicy::random(vec![5, 6, 6, 4], seed).unwrap()
}

fn reward() -> LatentReward {
    LatentReward { template: SceneSpec::latent_template(0), decode_seed: 0, config: Default::default() }
}

fn batch(policy: &VelocityPolicy, config: &TrainerConfig, groups: u64) -> Vec<GroupRollout> {
    (0..groups).map(|g| sample_group(policy, &reward(), config, 0, g).unwrap()).collect()
}

fn nudged(policy: &VelocityPolicy, scale: f64, seed: u64) -> VelocityPolicy {
    let direction = VelocityPolicy::random(policy.dims().to_vec(), seed).unwrap();
    let mut out = policy.clone();
    for (p, d) in out.params_mut().iter_mut().zip(direction.params()) {
        *p += scale * d;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn advantages_are_standardized(rewards in proptest::collection::vec(-1.0f64..0.0, 2..9), shift in -5.0f64..5.0) {
        let a = group_advantages(&rewards);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if a.iter().all(|&v| v == 0.0) {
            let m = rewards.iter().sum::<f64>() / n;
            let s = (rewards.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(s < 1e-9);
        } else {
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            for (x, y) in a.iter().zip(group_advantages(&shifted)) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn synchronized_initialization_and_degenerate_groups() {
    let policy = small_policy(1);
    let cfg = TrainerConfig::default();
    let g = sample_group(&policy, &reward(), &cfg, 3, 0).unwrap();
    assert!(g.eps_init.iter().all(|e| e == &g.eps_init[0]));
    assert!(g.trajectories.iter().all(|t| t[0].x_t == g.trajectories[0][0].x_t));
    assert!(g.rewards.iter().any(|r| *r != g.rewards[0]));

    let deterministic = TrainerConfig { noise_scale: 0.0, ..TrainerConfig::default() };
    let g = sample_group(&policy, &reward(), &deterministic, 3, 0).unwrap();
    assert!(g.rewards.iter().all(|r| *r == g.rewards[0]));
    assert_eq!(g.advantages, vec![0.0; 4]);

    let unsynced = TrainerConfig { sync_noise: false, ..TrainerConfig::default() };
    let g = sample_group(&policy, &reward(), &unsynced, 3, 0).unwrap();
    assert!(g.eps_init[1] != g.eps_init[0]);
}

#[test]
fn ratio_identities() {
    let policy = small_policy(2);
    let cfg = TrainerConfig::default();
    let group = sample_group(&policy, &reward(), &cfg, 0, 0).unwrap();
    for traj in &group.trajectories {
        for step in traj {
            assert_eq!(importance_ratio(&policy, step).unwrap(), 1.0);
        }
    }

    // shifting the output bias by b moves every mean coordinate by c * b
    let step = &group.trajectories[0][2];
    let x_at_mean = TrajectoryStep {
        x_next: step.mean.clone(),
        logp: Some(transition_logprob(&step.mean, &step.mean, step.sigma_step).unwrap()),
        ..step.clone()
    };
    let b = 0.01;
    let mut shifted = policy.clone();
    let n = shifted.num_params();
    for p in &mut shifted.params_mut()[n - 4..] {
        *p += b;
    }
    let delta = drift_coefficient(step.t, step.dt, step.sigma) * b;
    let expected = (-4.0 * delta * delta / (2.0 * step.sigma_step * step.sigma_step)).exp();
    let ratio = importance_ratio(&shifted, &x_at_mean).unwrap();
    assert!((ratio - expected).abs() < 1e-12 && ratio < 1.0, "{ratio} vs {expected}");

    // a hidden unit with zero outgoing weights does not affect the ratio
    let mut cut = policy.clone();
    let dims = cut.dims().to_vec();
    let blocks = cut.blocks();
    let (_, w2, _, _) = blocks.iter().find(|b| b.0 == "w2").unwrap().clone();
    let (_, w1, _, _) = blocks.iter().find(|b| b.0 == "w1").unwrap().clone();
    for k in 0..dims[3] {
        cut.params_mut()[w2 + k * dims[2]] = 0.0;
    }
    let base = cut.clone();
    for i in 0..dims[1] {
        cut.params_mut()[w1 + i] += 0.3;
    }
    for s in &group.trajectories[1] {
        let recorded = TrajectoryStep {
            mean: drift_mean(&s.x_t, &base.velocity(&s.x_t, s.t).unwrap(), s.t, s.dt, s.sigma),
            ..s.clone()
        };
        let recorded = TrajectoryStep {
            logp: Some(transition_logprob(&recorded.x_next, &recorded.mean, recorded.sigma_step).unwrap()),
            ..recorded
        };
        assert_eq!(importance_ratio(&cut, &recorded).unwrap(), 1.0);
    }
}

#[test]
fn unit_ratio_loss_and_vanilla_policy_gradient() {
    let policy = small_policy(3);
    let cfg = TrainerConfig { kl_beta: 0.0, ..TrainerConfig::default() };
    let groups = batch(&policy, &cfg, 3);
    let eval = surrogate_loss(&policy, &policy, &groups, &cfg, true).unwrap();
    let adv_mean: f64 = groups.iter().flat_map(|g| g.advantages.iter()).sum::<f64>() / 12.0;
    assert!((eval.loss + adv_mean).abs() < 1e-12);
    assert_eq!(eval.kl, 0.0);
    assert_eq!(eval.clip_fraction, 0.0);

    // independent oracle: central differences of the window log-densities
    let n_terms = (groups.len() * cfg.group_size * cfg.grad_window) as f64;
    let h = 1e-6;
    let weighted_logp = |p: &VelocityPolicy| -> f64 {
        let mut total = 0.0;
        for g in &groups {
            for (traj, adv) in g.trajectories.iter().zip(&g.advantages) {
                for s in traj.iter().take(cfg.grad_window) {
                    let mean = drift_mean(&s.x_t, &p.velocity(&s.x_t, s.t).unwrap(), s.t, s.dt, s.sigma);
                    total += adv * transition_logprob(&s.x_next, &mean, s.sigma_step).unwrap();
                }
            }
        }
        total
    };
    let scale = eval.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..policy.num_params() {
        let mut plus = policy.clone();
        plus.params_mut()[i] += h;
        let mut minus = policy.clone();
        minus.params_mut()[i] -= h;
        let fd = -(weighted_logp(&plus) - weighted_logp(&minus)) / (2.0 * h) / n_terms;
        assert!((fd - eval.grad[i]).abs() < 1e-8 * scale.max(1.0), "param {i}: {fd} vs {}", eval.grad[i]);
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences_off_policy() {
    let behavior = small_policy(4);
    let cfg = TrainerConfig { clip_eps: 10.0, kl_beta: 0.5, ..TrainerConfig::default() };
    let groups = batch(&behavior, &cfg, 2);
    let theta = nudged(&behavior, 1e-2, 40);
    let reference = nudged(&behavior, -1e-2, 41);
    let eval = surrogate_loss(&theta, &reference, &groups, &cfg, true).unwrap();
    assert!(eval.kl > 0.0);
    let h = 1e-6;
    let scale = eval.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..theta.num_params() {
        let mut plus = theta.clone();
        plus.params_mut()[i] += h;
        let mut minus = theta.clone();
        minus.params_mut()[i] -= h;
        let fd = (surrogate_loss(&plus, &reference, &groups, &cfg, false).unwrap().loss
            - surrogate_loss(&minus, &reference, &groups, &cfg, false).unwrap().loss)
            / (2.0 * h);
        assert!((fd - eval.grad[i]).abs() < 1e-7 * scale, "param {i}: {fd} vs {}", eval.grad[i]);
    }
}

#[test]
fn steps_outside_window_do_not_touch_gradient() {
    let behavior = small_policy(5);
    let cfg = TrainerConfig::default();
    let groups = batch(&behavior, &cfg, 2);
    let theta = nudged(&behavior, 1e-3, 50);
    let reference = nudged(&behavior, -1e-3, 51);
    let full = surrogate_loss(&theta, &reference, &groups, &cfg, true).unwrap();
    let mut zeroed = groups.clone();
    for g in &mut zeroed {
        for traj in &mut g.trajectories {
            for s in traj.iter_mut().skip(cfg.grad_window) {
                s.x_t.iter_mut().for_each(|v| *v = 0.0);
                s.mean.iter_mut().for_each(|v| *v = 0.0);
                s.z.iter_mut().for_each(|v| *v = 0.0);
                s.x_next.iter_mut().for_each(|v| *v = 0.0);
                s.logp = Some(0.0);
            }
        }
    }
    let cut = surrogate_loss(&theta, &reference, &zeroed, &cfg, true).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&full.grad), bits(&cut.grad));
    assert_eq!(full.loss.to_bits(), cut.loss.to_bits());
}

#[test]
fn wider_clip_never_lowers_objective() {
    let behavior = small_policy(6);
    let base = TrainerConfig::default();
    let groups = batch(&behavior, &base, 3);
    let theta = nudged(&behavior, 3e-2, 60);
    let mut prev = f64::NEG_INFINITY;
    for eps in [1e-4, 1e-3, 1e-2, 0.05, 0.2, 1.0] {
        let cfg = TrainerConfig { clip_eps: eps, ..base.clone() };
        let obj = surrogate_loss(&theta, &behavior, &groups, &cfg, false).unwrap().objective;
        assert!(obj >= prev, "eps {eps}: {obj} < {prev}");
        prev = obj;
    }
}

fn pretrained() -> VelocityPolicy {
    VelocityPolicy::random(vec![5, 16, 16, 4], 9).unwrap()
}

#[test]
fn huge_kl_penalty_anchors_parameters() {
    let cfg = TrainerConfig { kl_beta: 1e6, iterations: 50, groups_per_iter: 2, ..TrainerConfig::default() };
    let start = pretrained();
    let run = train(&cfg, &start, &SceneSpec::latent_template(0), |_| {}).unwrap();
    let moved = run.snapshot.theta.distance(&start);
    assert!(moved < 1e-3, "moved {moved}");
    assert_eq!(run.snapshot.theta_ref, start);
}

#[test]
fn zero_learning_rate_gives_flat_reward_curve() {
    let cfg = TrainerConfig { lr: 0.0, iterations: 100, groups_per_iter: 4, ..TrainerConfig::default() };
    let start = pretrained();
    let run = train(&cfg, &start, &SceneSpec::latent_template(0), |_| {}).unwrap();
    assert_eq!(run.snapshot.theta, start);
    assert_eq!(run.snapshot.theta_ema, start);
    let ys: Vec<f64> = run.metrics.iter().map(|m| m.reward_mean).collect();
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = (0..ys.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    let slope = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>() / sxx;
    let resid: f64 = ys.iter().enumerate().map(|(i, y)| (y - ym - slope * (i as f64 - xm)).powi(2)).sum();
    let se = (resid / (n - 2.0) / sxx).sqrt();
    let t = statrs::distribution::StudentsT::new(0.0, 1.0, n - 2.0).unwrap();
    let q = statrs::distribution::ContinuousCDF::inverse_cdf(&t, 0.975);
    assert!(slope.abs() <= q * se, "slope {slope:e} outside +-{:e}", q * se);
}

#[test]
fn synchronized_noise_lowers_within_group_spread() {
    let policy = ToyPretrainConfig::default().run().unwrap().policy;
    let spread = |sync: bool| -> f64 {
        let cfg = TrainerConfig { sync_noise: sync, ..TrainerConfig::default() };
        let r = reward();
        (0..200u64)
            .map(|g| {
                let rewards = sample_group(&policy, &r, &cfg, 0, g).unwrap().rewards;
                let m = rewards.iter().sum::<f64>() / rewards.len() as f64;
                rewards.iter().map(|x| (x - m).powi(2)).sum::<f64>() / rewards.len() as f64
            })
            .sum::<f64>()
            / 200.0
    };
    let (on, off) = (spread(true), spread(false));
    println!("within-group reward variance: sync {on:.4e}, independent {off:.4e}");
    assert!(on < off);
}

#[test]
fn metric_stream_is_identical_across_thread_counts() {
    let cfg = TrainerConfig { iterations: 4, groups_per_iter: 4, ..TrainerConfig::default() };
    let start = pretrained();
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut lines = Vec::new();
            let run = train(&cfg, &start, &SceneSpec::latent_template(0), |m| lines.push(serde_json::to_string(m).unwrap())).unwrap();
            (lines, run.snapshot.theta)
        })
    };
    let (a, ta) = run_with(1);
    let (b, tb) = run_with(8);
    let (c, _) = run_with(1);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(ta, tb);
}

#[test]
fn config_json_round_trip() {
    let cfg = TrainerConfig { seed: 17, sync_noise: false, ..TrainerConfig::default() };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainerConfig>(&text).unwrap(), cfg);
    let bad = serde_json::from_str::<TrainerConfig>(r#"{"grad_window": 11}"#).unwrap();
    assert!(bad.validate().unwrap_err().to_string().contains("grad_window exceeds steps"));
}
