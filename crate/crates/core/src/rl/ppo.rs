//! Rollout storage and the clipped PPO update for the actor, the critics and the
//! supervised estimator heads.

use puma_nn::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::agent::Networks;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub estimator_learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub estimator_epochs: usize,
    pub estimator_minibatches: usize,
    pub max_grad_norm: f64,
    pub horizon: usize,
    /// Multiplies rewards before they reach the critics.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.005,
            learning_rate: 3e-4,
            estimator_learning_rate: 3e-4,
            epochs: 4,
            minibatches: 4,
            estimator_epochs: 1,
            estimator_minibatches: 4,
            max_grad_norm: 1.0,
            horizon: 24,
            reward_scale: 0.02,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.lambda)
            && self.clip > 0.0
            && self.learning_rate > 0.0
            && self.estimator_learning_rate > 0.0
            && self.epochs > 0
            && self.minibatches > 0
            && self.estimator_minibatches > 0
            && self.horizon > 0
            && self.max_grad_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("ppo settings out of range".into()))
        }
    }
}

/// Row-major rollout storage; row `t * n_envs + e` is environment `e` at step `t`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub horizon: usize,
    pub policy_dim: usize,
    pub critic_dim: usize,
    pub proprio_len: usize,
    pub depth_len: usize,
    pub prior_dim: usize,
    pub grid_dim: usize,
    pub policy_inputs: Vec<f32>,
    pub critic_inputs: Vec<f32>,
    pub proprio: Vec<f32>,
    pub depth: Vec<f32>,
    pub prior_targets: Vec<f32>,
    pub velocity_targets: Vec<f32>,
    pub grid_targets: Vec<f32>,
    pub actions: Vec<f32>,
    pub log_probs: Vec<f32>,
    /// Per critic, per row.
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Per critic, per environment: value after the last step.
    pub last_values: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
    /// Whether the actor saw the estimated prior.
    pub used_estimate: Vec<bool>,
}

impl RolloutBatch {
    pub fn rows(&self) -> usize {
        self.dones.len()
    }

    /// Column of row-major `per_row` values for one environment.
    pub fn env_series<T: Copy>(&self, per_row: &[T], env: usize) -> Vec<T> {
        (0..self.horizon).map(|t| per_row[t * self.n_envs + env]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_envs * self.horizon;
        let checks = [
            (self.policy_inputs.len(), n * self.policy_dim, "policy inputs"),
            (self.critic_inputs.len(), n * self.critic_dim, "critic inputs"),
            (self.proprio.len(), n * self.proprio_len, "proprio"),
            (self.depth.len(), n * self.depth_len, "depth"),
            (self.prior_targets.len(), n * self.prior_dim, "prior targets"),
            (self.velocity_targets.len(), n * 3, "velocity targets"),
            (self.grid_targets.len(), n * self.grid_dim, "grid targets"),
            (self.actions.len(), n * crate::sim::ACTION_DIM, "actions"),
            (self.log_probs.len(), n, "log probs"),
            (self.dones.len(), n, "dones"),
            (self.used_estimate.len(), n, "estimate flags"),
        ];
        for (found, expected, what) in checks {
            if found != expected {
                return Err(Error::Training(format!("rollout {what}: {found} values, expected {expected}")));
            }
        }
        for (r, v) in self.rewards.iter().zip(&self.values) {
            if r.len() != n || v.len() != n {
                return Err(Error::Training("rollout rewards/values length".into()));
            }
        }
        Ok(())
    }
}

/// Per-critic GAE over the whole batch. Returns `(advantages, targets)` per critic,
/// row-major like the batch.
pub fn batch_gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = batch.rows();
    let mut advs = Vec::new();
    let mut targets = Vec::new();
    for c in 0..batch.rewards.len() {
        let mut adv = vec![0.0; n];
        let mut tgt = vec![0.0; n];
        for e in 0..batch.n_envs {
            let r = batch.env_series(&batch.rewards[c], e);
            let v = batch.env_series(&batch.values[c], e);
            let d = batch.env_series(&batch.dones, e);
            let (a, t) = super::advantage::gae(&r, &v, &d, batch.last_values[c][e], gamma, lambda);
            for s in 0..batch.horizon {
                adv[s * batch.n_envs + e] = a[s];
                tgt[s * batch.n_envs + e] = t[s];
            }
        }
        advs.push(adv);
        targets.push(tgt);
    }
    (advs, targets)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Optimizers {
    pub estimator: Adam,
    pub policy: Adam,
    pub critics: Vec<Adam>,
}

impl Optimizers {
    pub fn new(nets: &Networks, cfg: &PpoConfig) -> Self {
        Self {
            estimator: Adam::new(&nets.estimator_store, cfg.estimator_learning_rate),
            policy: Adam::new(&nets.policy_store, cfg.learning_rate),
            critics: nets.critic_stores.iter().map(|s| Adam::new(s, cfg.learning_rate)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub policy: f64,
    pub critics: Vec<f64>,
    pub fhat_mse: f64,
    pub vhat_mse: f64,
    pub reconstruction: f64,
    pub entropy: f64,
    /// Set when a non-finite loss or gradient aborted the update.
    pub aborted: Option<String>,
}

fn gather_rows(data: &[f32], width: usize, idx: &[usize]) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&data[i * width..(i + 1) * width]);
    }
    Ok(Tensor::new(&[idx.len(), width], out)?)
}

fn vec_tensor(values: impl Iterator<Item = f32>) -> Result<Tensor<f32>> {
    let v: Vec<f32> = values.collect();
    Ok(Tensor::new(&[v.len()], v)?)
}

fn mse(g: &mut Graph<f32>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

/// Backward, clip and step one store. Returns an error message on non-finite values.
fn apply(g: &mut Graph<f32>, loss: Var, store: &mut ParamStore<f32>, opt: &mut Adam, max_norm: f64, what: &str) -> std::result::Result<(), String> {
    let value = scalar(g, loss);
    if !value.is_finite() {
        return Err(format!("{what} loss is {value}"));
    }
    g.backward(loss).map_err(|e| e.to_string())?;
    store.zero_grad();
    store.accumulate(g);
    let norm = store.clip_grad_norm(max_norm);
    if !norm.is_finite() {
        return Err(format!("{what} gradient norm is {norm}"));
    }
    opt.step(store);
    Ok(())
}

/// Minibatch index sets covering `0..n` in a random order.
fn minibatches<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let size = n.div_ceil(count.max(1)).max(1);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

/// One PPO pass: clipped surrogate plus entropy for the actor, squared TD-target error
/// for each critic on its own group, and supervised regression for the estimator.
/// On any non-finite loss every parameter and optimizer state is restored.
pub fn ppo_update<R: Rng>(
    nets: &mut Networks,
    opt: &mut Optimizers,
    batch: &RolloutBatch,
    advantages: &[f64],
    targets: &[Vec<f64>],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossReport> {
    batch.validate()?;
    if targets.len() != nets.critics.len() || advantages.len() != batch.rows() {
        return Err(Error::Training("advantage/target shapes do not match the batch".into()));
    }
    let saved = (
        nets.estimator_store.clone(),
        nets.policy_store.clone(),
        nets.critic_stores.clone(),
        opt.clone(),
    );
    let result = run_update(nets, opt, batch, advantages, targets, cfg, rng);
    match result {
        Ok(Ok(report)) => Ok(report),
        Ok(Err(msg)) => {
            nets.estimator_store = saved.0;
            nets.policy_store = saved.1;
            nets.critic_stores = saved.2;
            *opt = saved.3;
            Ok(LossReport {
                aborted: Some(msg),
                ..LossReport::default()
            })
        }
        Err(e) => Err(e),
    }
}

#[allow(clippy::type_complexity)]
fn run_update<R: Rng>(
    nets: &mut Networks,
    opt: &mut Optimizers,
    batch: &RolloutBatch,
    advantages: &[f64],
    targets: &[Vec<f64>],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<std::result::Result<LossReport, String>> {
    let n = batch.rows();
    let act = crate::sim::ACTION_DIM;
    let mut report = LossReport {
        critics: vec![0.0; nets.critics.len()],
        ..Default::default()
    };
    let mut policy_count = 0usize;
    for _ in 0..cfg.epochs {
        for idx in minibatches(n, cfg.minibatches, rng) {
            let mut g = Graph::new();
            let x = g.constant(gather_rows(&batch.policy_inputs, batch.policy_dim, &idx)?);
            let a = g.constant(gather_rows(&batch.actions, act, &idx)?);
            let old = g.constant(vec_tensor(idx.iter().map(|&i| batch.log_probs[i]))?);
            let adv = g.constant(vec_tensor(idx.iter().map(|&i| advantages[i] as f32))?);
            let (mean, log_std) = nets.policy.forward(&mut g, &nets.policy_store, x)?;
            let lp = nets.policy.log_prob(&mut g, mean, log_std, a)?;
            let diff = g.sub(lp, old)?;
            let ratio = g.exp(diff);
            let s1 = g.mul(ratio, adv)?;
            let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let s2 = g.mul(clipped, adv)?;
            let surr = g.minimum(s1, s2)?;
            let surr = g.mean(surr);
            let surr = g.scale(surr, -1.0);
            let ent = nets.policy.entropy(&mut g, log_std);
            let bonus = g.scale(ent, -cfg.entropy_coef);
            let loss = g.add(surr, bonus)?;
            report.policy += scalar(&g, loss);
            report.entropy += scalar(&g, ent);
            policy_count += 1;
            if let Err(msg) = apply(&mut g, loss, &mut nets.policy_store, &mut opt.policy, cfg.max_grad_norm, "policy") {
                return Ok(Err(msg));
            }

            let xc = gather_rows(&batch.critic_inputs, batch.critic_dim, &idx)?;
            for c in 0..nets.critics.len() {
                let mut g = Graph::new();
                let x = g.constant(xc.clone());
                let t = g.constant(vec_tensor(idx.iter().map(|&i| targets[c][i] as f32))?);
                let v = nets.critics[c].forward(&mut g, &nets.critic_stores[c], x)?;
                let loss = mse(&mut g, v, t)?;
                report.critics[c] += scalar(&g, loss);
                if let Err(msg) = apply(&mut g, loss, &mut nets.critic_stores[c], &mut opt.critics[c], cfg.max_grad_norm, "critic") {
                    return Ok(Err(msg));
                }
            }
        }
    }
    let pc = policy_count.max(1) as f64;
    report.policy /= pc;
    report.entropy /= pc;
    report.critics.iter_mut().for_each(|c| *c /= pc);

    let ec = &nets.estimator.cfg;
    let proprio_shape = [ec.history, ec.proprio_dim];
    let depth_shape = [ec.depth_frames, ec.depth_height, ec.depth_width];
    let mut est_count = 0usize;
    for _ in 0..cfg.estimator_epochs {
        for idx in minibatches(n, cfg.estimator_minibatches, rng) {
            let mut g = Graph::new();
            let p = gather_rows(&batch.proprio, batch.proprio_len, &idx)?;
            let d = gather_rows(&batch.depth, batch.depth_len, &idx)?;
            let mut ps = vec![idx.len()];
            ps.extend_from_slice(&proprio_shape);
            let mut ds = vec![idx.len()];
            ds.extend_from_slice(&depth_shape);
            let p = g.constant(p.reshaped(&ps)?);
            let d = g.constant(d.reshaped(&ds)?);
            let out = nets.estimator.forward(&mut g, &nets.estimator_store, p, d)?;
            let tf = g.constant(gather_rows(&batch.prior_targets, batch.prior_dim, &idx)?);
            let tv = g.constant(gather_rows(&batch.velocity_targets, 3, &idx)?);
            let tg = g.constant(gather_rows(&batch.grid_targets, batch.grid_dim, &idx)?);
            let lf = mse(&mut g, out.prior, tf)?;
            let lv = mse(&mut g, out.velocity, tv)?;
            let rec = nets.estimator.decode(&mut g, &nets.estimator_store, out.latent)?;
            let lr = mse(&mut g, rec, tg)?;
            report.fhat_mse += scalar(&g, lf);
            report.vhat_mse += scalar(&g, lv);
            report.reconstruction += scalar(&g, lr);
            est_count += 1;
            let sum = g.add(lf, lv)?;
            let loss = g.add(sum, lr)?;
            if let Err(msg) = apply(&mut g, loss, &mut nets.estimator_store, &mut opt.estimator, cfg.max_grad_norm, "estimator") {
                return Ok(Err(msg));
            }
        }
    }
    let ec = est_count.max(1) as f64;
    report.fhat_mse /= ec;
    report.vhat_mse /= ec;
    report.reconstruction /= ec;
    Ok(Ok(report))
}
