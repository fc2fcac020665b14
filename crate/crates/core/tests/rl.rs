use proptest::prelude::*;
use puma_core::env::EnvConfig;
use puma_core::rl::agent::{NetsConfig, Networks};
use puma_core::rl::ppo::{batch_gae, ppo_update, Optimizers, PpoConfig, RolloutBatch};
use puma_core::rl::{compute_rewards, curriculum_step, gae, mix_advantages, pas_select, PasSchedule, RewardInputs, RewardWeights, Variant};
use puma_core::sensors::OBS_DIM;
use puma_core::sim::{Outcome, ACTION_DIM};
use puma_nn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(rng: &mut ChaCha8Rng) -> RewardInputs {
    let mut v3 = || [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    let (command, lin_vel, ang_vel, gravity) = (v3(), v3(), v3(), v3());
    let mut v12 = || (0..ACTION_DIM).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
    let (joint_acc, action, prev_action, prev_prev_action) = (v12(), v12(), v12(), v12());
    RewardInputs {
        command,
        lin_vel,
        ang_vel,
        gravity,
        d_left: rng.gen_range(0.0..1.0),
        d_right: rng.gen_range(0.0..1.0),
        psi: rng.gen_range(-3.0..3.0),
        eps: 0.2,
        joint_acc: joint_acc.iter().map(|x| x * 100.0).collect(),
        power: rng.gen_range(0.0..500.0),
        n_col: rng.gen_range(0..3),
        action,
        prev_action,
        prev_prev_action,
    }
}

#[test]
fn every_reward_term_matches_direct_evaluation() {
    let w = RewardWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
    for _ in 0..1000 {
        let i = random_inputs(&mut rng);
        let r = compute_rewards(&i, &w);
        let dvx = i.command[0] - i.lin_vel[0];
        let dvy = i.command[1] - i.lin_vel[1];
        assert!(close(r.lin_vel, (-4.0 * (dvx * dvx + dvy * dvy)).exp()));
        assert!(close(r.ang_vel, 0.5 * (-4.0 * (i.command[2] - i.ang_vel[2]).powi(2)).exp()));
        assert!(close(r.foothold_dense, (-(i.d_left + i.d_right)).exp()));
        let sparse = if i.d_left < i.eps && i.d_right < i.eps { 1.0 } else { 0.0 };
        assert_eq!(r.foothold_sparse, sparse);
        assert!(close(r.foothold_yaw, (-i.psi.abs()).exp()));
        assert!(close(r.vel_z, -i.lin_vel[2].powi(2)));
        assert!(close(r.ang_vel_xy, -0.05 * (i.ang_vel[0].powi(2) + i.ang_vel[1].powi(2))));
        assert!(close(r.orientation, -(i.gravity[0].powi(2) + i.gravity[1].powi(2))));
        let acc: f64 = i.joint_acc.iter().map(|x| x * x).sum();
        assert!(close(r.joint_acc, -2.5e-7 * acc));
        assert!(close(r.power, -2e-5 * i.power));
        assert!(close(r.collision, -10.0 * i.n_col as f64));
        let mut rate = 0.0;
        let mut smooth = 0.0;
        for k in 0..ACTION_DIM {
            rate += (i.action[k] - i.prev_action[k]).powi(2);
            smooth += (i.action[k] - 2.0 * i.prev_action[k] + i.prev_prev_action[k]).powi(2);
        }
        assert!(close(r.action_rate, -0.01 * rate));
        assert!(close(r.smoothness, -0.01 * smooth));
        assert!(close(r.total(&w), 3.0 * r.task() + 1.5 * r.foothold() + r.style()));
    }
}

#[test]
fn reward_examples() {
    let w = RewardWeights::default();
    let i = RewardInputs {
        command: [1.5, 0.0, 0.0],
        lin_vel: [1.0, 0.0, 0.0],
        eps: 0.2,
        ..Default::default()
    };
    let r = compute_rewards(&i, &w);
    assert!((r.lin_vel - (-1.0f64).exp()).abs() < 1e-15);
    assert_eq!(r.foothold_dense, 1.0);
    assert_eq!(r.foothold_yaw, 1.0);
    assert_eq!(r.foothold_sparse, 1.0);
    // Perfect tracking saturates the task group.
    let perfect = RewardInputs {
        command: [1.0, 0.0, 0.3],
        lin_vel: [1.0, 0.0, 0.0],
        ang_vel: [0.0, 0.0, 0.3],
        eps: 0.2,
        ..Default::default()
    };
    assert_eq!(compute_rewards(&perfect, &w).task(), 1.5);
}

/// Discounted sum of TD errors up to the first episode end, evaluated term by term.
fn brute_gae(r: &[f64], v: &[f64], d: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in t..n {
                let next = if d[k] {
                    0.0
                } else if k + 1 == n {
                    last
                } else {
                    v[k + 1]
                };
                let delta = r[k] + gamma * next - v[k];
                total += (gamma * lambda).powi((k - t) as i32) * delta;
                if d[k] {
                    break;
                }
            }
            total
        })
        .collect()
}

#[test]
fn gae_matches_brute_force_on_short_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=8);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let last = rng.gen_range(-1.0..1.0);
        let gamma = rng.gen_range(0.0..=1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let (a, targets) = gae(&r, &v, &d, last, gamma, lambda);
        let oracle = brute_gae(&r, &v, &d, last, gamma, lambda);
        for t in 0..n {
            assert!((a[t] - oracle[t]).abs() < 1e-10, "{a:?} vs {oracle:?}");
            assert!((targets[t] - a[t] - v[t]).abs() < 1e-15);
        }
    }
}

#[test]
fn gae_special_cases() {
    let r = [0.5, -1.0, 2.0, 0.25];
    let v = [0.1, 0.2, -0.3, 0.4];
    let d = [false, true, false, false];
    let (a, _) = gae(&r, &v, &d, 0.7, 0.0, 0.95);
    for t in 0..4 {
        assert_eq!(a[t], r[t] - v[t]);
    }
    let (a, _) = gae(&r, &v, &d, 0.7, 0.9, 0.0);
    assert_eq!(a[0], r[0] + 0.9 * v[1] - v[0]);
    assert_eq!(a[1], r[1] - v[1]);
    assert_eq!(a[3], r[3] + 0.9 * 0.7 - v[3]);
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn random_advantages(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..3).map(|k| (0..n).map(|_| rng.gen_range(-1.0..1.0) * (k + 1) as f64).collect()).collect()
}

#[test]
fn mixed_advantage_is_standardized_and_scale_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.gen_range(2..300);
        let a = random_advantages(&mut rng, n);
        let w = [rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0)];
        let m = mix_advantages(&a, &w);
        let (mean, std) = moments(&m);
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        let c = rng.gen_range(0.01..100.0);
        let scaled = mix_advantages(&a, &w.map(|x| x * c));
        for (x, y) in m.iter().zip(&scaled) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn single_weight_reduces_to_that_groups_normalized_advantage() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_advantages(&mut rng, 64);
    let m = mix_advantages(&a, &[0.0, 2.0, 0.0]);
    let (mean, std) = moments(&a[1]);
    for (x, y) in m.iter().zip(&a[1]) {
        assert!((x - (y - mean) / std).abs() < 1e-12);
    }
}

#[test]
fn constant_advantages_do_not_divide_by_zero() {
    let m = mix_advantages(&[vec![1.0; 8]], &[1.0]);
    assert!(m.iter().all(|x| *x == 0.0));
}

#[test]
fn pas_endpoints_and_midpoint_frequency() {
    let s = PasSchedule::new(300);
    assert_eq!(s.p(0), 0.0);
    assert_eq!(s.p(300), 1.0);
    assert_eq!(s.p(1000), 1.0);
    let mut last = 0.0;
    for t in 0..=300 {
        assert!(s.p(t) >= last);
        last = s.p(t);
    }
    let p = s.p(200);
    assert!((p - 0.5).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hits = (0..100_000).filter(|_| pas_select(p, &mut rng)).count();
    assert!((hits as f64 / 1e5 - 0.5).abs() < 0.01, "{hits}");
    assert!(!(0..1000).any(|_| pas_select(0.0, &mut rng)));
    assert!((0..1000).all(|_| pas_select(1.0, &mut rng)));
}

/// Reference state machine: promote on finish, demote after two falls in a row.
fn scripted_levels(outcomes: &[Outcome], levels: usize) -> Vec<usize> {
    let mut level = 0usize;
    let mut streak = 0;
    let mut trace = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Finished => {
                level = (level + 1).min(levels - 1);
                streak = 0;
            }
            Outcome::Fell | Outcome::Collided => {
                streak += 1;
                if streak == 2 {
                    level = level.saturating_sub(1);
                    streak = 0;
                }
            }
            Outcome::Timeout => streak = 0,
            Outcome::Running => {}
        }
        trace.push(level);
    }
    trace
}

#[test]
fn curriculum_examples() {
    assert_eq!(curriculum_step(3, 0, Outcome::Finished, 10, 2), (4, 0));
    assert_eq!(curriculum_step(9, 0, Outcome::Finished, 10, 2), (9, 0));
    assert_eq!(curriculum_step(3, 0, Outcome::Fell, 10, 2), (3, 1));
    assert_eq!(curriculum_step(3, 1, Outcome::Fell, 10, 2), (2, 0));
    assert_eq!(curriculum_step(0, 1, Outcome::Fell, 10, 2), (0, 0));
    assert_eq!(curriculum_step(3, 1, Outcome::Timeout, 10, 2), (3, 0));
}

#[test]
fn curriculum_follows_the_scripted_oracle() {
    let alternating: Vec<Outcome> = (0..20).map(|k| if k % 2 == 0 { Outcome::Finished } else { Outcome::Fell }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let choices = [Outcome::Finished, Outcome::Fell, Outcome::Collided, Outcome::Timeout];
    let random: Vec<Outcome> = (0..500).map(|_| choices[rng.gen_range(0..4)]).collect();
    for seq in [alternating, random] {
        let mut state = (0, 0);
        let mut trace = Vec::new();
        for &o in &seq {
            state = curriculum_step(state.0, state.1, o, 10, 2);
            trace.push(state.0);
        }
        assert_eq!(trace, scripted_levels(&seq, 10));
    }
}

fn small_env() -> EnvConfig {
    let mut env = EnvConfig::default();
    env.camera.width = 16;
    env.camera.height = 12;
    env.history = 3;
    env
}

fn small_nets() -> NetsConfig {
    NetsConfig {
        conv_channels: vec![4, 4],
        token_dim: 16,
        heads: 2,
        gru_hidden: 16,
        head_hidden: 16,
        latent_dim: 8,
        policy_hidden: vec![32, 32],
        critic_hidden: vec![32],
        init_std: 0.5,
    }
}

fn random_batch(nets: &Networks, env: &EnvConfig, n_envs: usize, horizon: usize, seed: u64) -> RolloutBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = n_envs * horizon;
    let ec = &nets.estimator.cfg;
    let mut fill = |len: usize| (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<f32>>();
    let critic_dim = small_nets().critic_input_dim(env, nets.variant);
    let mut b = RolloutBatch {
        n_envs,
        horizon,
        policy_dim: nets.policy_input_dim(),
        critic_dim,
        proprio_len: ec.history * OBS_DIM,
        depth_len: ec.depth_frames * ec.depth_height * ec.depth_width,
        prior_dim: ec.prior_dim,
        grid_dim: ec.grid_dim,
        ..Default::default()
    };
    b.policy_inputs = fill(rows * b.policy_dim);
    b.critic_inputs = fill(rows * critic_dim);
    b.proprio = fill(rows * b.proprio_len);
    b.depth = fill(rows * b.depth_len).into_iter().map(|x| 0.5 + 0.5 * x).collect();
    b.prior_targets = fill(rows * b.prior_dim);
    b.velocity_targets = fill(rows * 3);
    b.grid_targets = fill(rows * b.grid_dim);
    b.actions = fill(rows * ACTION_DIM);
    let k = nets.critics.len();
    b.rewards = (0..k).map(|_| fill(rows).into_iter().map(f64::from).collect()).collect();
    b.values = (0..k).map(|_| vec![0.0; rows]).collect();
    b.last_values = (0..k).map(|_| vec![0.0; n_envs]).collect();
    b.dones = (0..rows).map(|i| i % 7 == 6).collect();
    b.used_estimate = vec![false; rows];
    b.log_probs = current_log_probs(nets, &b);
    b
}

fn current_log_probs(nets: &Networks, b: &RolloutBatch) -> Vec<f32> {
    let rows = b.rows();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[rows, b.policy_dim], b.policy_inputs.clone()).unwrap());
    let a = g.constant(Tensor::new(&[rows, ACTION_DIM], b.actions.clone()).unwrap());
    let (mean, log_std) = nets.policy.forward(&mut g, &nets.policy_store, x).unwrap();
    let lp = nets.policy.log_prob(&mut g, mean, log_std, a).unwrap();
    g.value(lp).data().to_vec()
}

fn surrogate(nets: &Networks, b: &RolloutBatch, adv: &[f64]) -> f64 {
    let lp = current_log_probs(nets, b);
    let n = adv.len() as f64;
    -lp.iter().zip(&b.log_probs).zip(adv).map(|((new, old), a)| ((new - old) as f64).exp() * a).sum::<f64>() / n
}

fn critic_mse(nets: &Networks, b: &RolloutBatch, targets: &[Vec<f64>]) -> Vec<f64> {
    let rows: Vec<&[f32]> = b.critic_inputs.chunks(b.critic_dim).collect();
    let values = nets.values(&rows).unwrap();
    values
        .iter()
        .zip(targets)
        .map(|(v, t)| v.iter().zip(t).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>() / t.len() as f64)
        .collect()
}

fn single_pass() -> PpoConfig {
    PpoConfig {
        epochs: 1,
        minibatches: 1,
        estimator_epochs: 1,
        estimator_minibatches: 1,
        learning_rate: 1e-3,
        estimator_learning_rate: 1e-3,
        ..Default::default()
    }
}

fn store_bits(s: &ParamStore<f32>) -> Vec<u32> {
    s.ids().flat_map(|id| s.value(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn one_update_lowers_policy_and_critic_losses() {
    let env = small_env();
    let mut nets = Networks::new(&small_nets(), &env, Variant::Full, 1).unwrap();
    let batch = random_batch(&nets, &env, 8, 6, 2);
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..single_pass()
    };
    let (advs, targets) = batch_gae(&batch, cfg.gamma, cfg.lambda);
    let mixed = mix_advantages(&advs, &[3.0, 1.5, 1.0]);
    let before_surr = surrogate(&nets, &batch, &mixed);
    let before_critic = critic_mse(&nets, &batch, &targets);
    let mut opt = Optimizers::new(&nets, &cfg);
    let report = ppo_update(&mut nets, &mut opt, &batch, &mixed, &targets, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(report.aborted.is_none());
    assert!(before_surr.abs() < 1e-6, "ratio starts at one");
    assert!(surrogate(&nets, &batch, &mixed) < before_surr);
    for (after, before) in critic_mse(&nets, &batch, &targets).iter().zip(&before_critic) {
        assert!(after < before, "{after} vs {before}");
    }
}

#[test]
fn clip_blocks_the_gradient_once_ratio_is_past_the_bound() {
    let env = small_env();
    let mut nets = Networks::new(&small_nets(), &env, Variant::Full, 3).unwrap();
    let mut batch = random_batch(&nets, &env, 4, 6, 4);
    // Old log-probs one nat lower: ratio e > 1 + clip everywhere.
    batch.log_probs.iter_mut().for_each(|x| *x -= 1.0);
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..single_pass()
    };
    let (_, targets) = batch_gae(&batch, cfg.gamma, cfg.lambda);
    let before = store_bits(&nets.policy_store);
    let mut opt = Optimizers::new(&nets, &cfg);
    ppo_update(&mut nets, &mut opt, &batch, &vec![1.0; batch.rows()], &targets, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(store_bits(&nets.policy_store), before);
}

#[test]
fn at_unit_ratio_clipping_changes_nothing() {
    let env = small_env();
    let base = Networks::new(&small_nets(), &env, Variant::Full, 5).unwrap();
    let batch = random_batch(&base, &env, 4, 6, 6);
    let (advs, targets) = batch_gae(&batch, 0.99, 0.95);
    let mixed = mix_advantages(&advs, &[3.0, 1.5, 1.0]);
    let run = |clip: f64| {
        let mut nets = Networks::new(&small_nets(), &env, Variant::Full, 5).unwrap();
        let cfg = PpoConfig { clip, ..single_pass() };
        let mut opt = Optimizers::new(&nets, &cfg);
        ppo_update(&mut nets, &mut opt, &batch, &mixed, &targets, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store_bits(&nets.policy_store)
    };
    assert_eq!(run(0.2), run(1e6));
}

#[test]
fn each_critic_learns_only_from_its_own_group() {
    let env = small_env();
    let base = Networks::new(&small_nets(), &env, Variant::Full, 7).unwrap();
    let batch = random_batch(&base, &env, 4, 6, 8);
    let (advs, targets) = batch_gae(&batch, 0.99, 0.95);
    let mixed = mix_advantages(&advs, &[3.0, 1.5, 1.0]);
    let run = |targets: &[Vec<f64>]| {
        let mut nets = Networks::new(&small_nets(), &env, Variant::Full, 7).unwrap();
        let cfg = single_pass();
        let mut opt = Optimizers::new(&nets, &cfg);
        ppo_update(&mut nets, &mut opt, &batch, &mixed, targets, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        nets.critic_stores.iter().map(store_bits).collect::<Vec<_>>()
    };
    let reference = run(&targets);
    for changed in 0..3 {
        let mut t = targets.clone();
        t[changed].iter_mut().for_each(|x| *x += 5.0);
        let critics = run(&t);
        for c in 0..3 {
            if c == changed {
                assert_ne!(critics[c], reference[c]);
            } else {
                assert_eq!(critics[c], reference[c], "critic {c} moved when group {changed} changed");
            }
        }
    }
}

#[test]
fn non_finite_advantages_abort_and_keep_parameters() {
    let env = small_env();
    let mut nets = Networks::new(&small_nets(), &env, Variant::Full, 9).unwrap();
    let batch = random_batch(&nets, &env, 4, 6, 10);
    let (_, targets) = batch_gae(&batch, 0.99, 0.95);
    let mut adv = vec![0.5; batch.rows()];
    adv[3] = f64::NAN;
    let before = (store_bits(&nets.policy_store), store_bits(&nets.estimator_store));
    let cfg = single_pass();
    let mut opt = Optimizers::new(&nets, &cfg);
    let report = ppo_update(&mut nets, &mut opt, &batch, &adv, &targets, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(report.aborted.is_some());
    assert_eq!((store_bits(&nets.policy_store), store_bits(&nets.estimator_store)), before);
}

proptest! {
    #[test]
    fn pas_probability_is_monotone(total in 1usize..5000, a in 0usize..6000, b in 0usize..6000) {
        let s = PasSchedule::new(total);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(s.p(lo) <= s.p(hi));
        prop_assert!((0.0..=1.0).contains(&s.p(a)));
    }

    #[test]
    fn reward_groups_sum_their_terms(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = random_inputs(&mut rng);
        let r = compute_rewards(&i, &RewardWeights::default());
        prop_assert!(r.task() >= 0.0 && r.task() <= 1.5);
        prop_assert!(r.foothold() >= 0.0 && r.foothold() <= 3.0);
        prop_assert!(r.style() <= 0.0);
    }
}
