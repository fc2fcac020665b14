//! The training loop: vectorized rollouts with PAS input selection, per-critic GAE,
//! mixed advantages and one PPO pass per iteration.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use puma_nn::{Checkpoint, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig, EnvSnapshot, EpisodeResult};
use crate::error::{Error, Result};
use crate::rl::advantage::mix_advantages;
use crate::rl::agent::{EnvInputs, NetsConfig, Networks};
use crate::rl::curriculum::{curriculum_step, CurriculumConfig};
use crate::rl::pas::{pas_select, PasSchedule};
use crate::rl::ppo::{batch_gae, ppo_update, LossReport, Optimizers, PpoConfig, RolloutBatch};
use crate::rl::rewards::{RewardGroups, RewardWeights};
use crate::rl::variant::Variant;
use crate::sim::{Outcome, ACTION_DIM};
use crate::terrain::TerrainFamily;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_envs: usize,
    pub iterations: usize,
    /// Environment `i` trains on `families[i % len]`.
    pub families: Vec<TerrainFamily>,
    /// PAS annealing length as a fraction of `iterations`.
    pub pas_fraction: f64,
    /// Zero disables periodic checkpoints; one is still written at exit.
    pub checkpoint_every: usize,
    /// Number of recent episodes behind the success and traverse rates.
    pub stats_window: usize,
    /// Single-threaded rollouts.
    pub deterministic: bool,
    /// Rollout worker threads; 0 picks the rayon default.
    pub threads: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_envs: 64,
            iterations: 500,
            families: vec![TerrainFamily::Flat],
            pas_fraction: 0.6,
            checkpoint_every: 50,
            stats_window: 100,
            deterministic: false,
            threads: 0,
            variant: Variant::Full,
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerSetup {
    pub seed: u64,
    pub env: EnvConfig,
    pub nets: NetsConfig,
    pub ppo: PpoConfig,
    pub curriculum: CurriculumConfig,
    pub train: TrainConfig,
}

impl TrainerSetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        if self.train.n_envs == 0 || self.train.families.is_empty() {
            return Err(Error::Config("training needs at least one environment and terrain family".into()));
        }
        if !(0.0..=1.0).contains(&self.train.pas_fraction) {
            return Err(Error::Config("pas_fraction must lie in [0, 1]".into()));
        }
        if self.env.prior != self.train.variant.prior_kind() {
            return Err(Error::Config(format!(
                "variant `{}` needs prior kind {:?}, environment uses {:?}",
                self.train.variant,
                self.train.variant.prior_kind(),
                self.env.prior
            )));
        }
        Ok(())
    }

    /// FNV-1a digest of everything except the iteration budget.
    pub fn digest(&self) -> u64 {
        let mut s = self.clone();
        s.train.iterations = 0;
        s.train.threads = 0;
        s.train.checkpoint_every = 0;
        let bytes = bincode::serialize(&s).expect("setup serializes");
        fnv1a(&bytes)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for environment `index` of a run.
pub fn env_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const METRICS_HEADER: &str = "iter,p_t,mean_reward_task,mean_reward_foothold,mean_reward_style,loss_policy,loss_critic_task,loss_critic_foothold,loss_critic_style,loss_fhat_mse,loss_vhat_mse,mean_level,sr_window,tr_window";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub p_t: f64,
    pub mean_reward: [f64; 3],
    pub loss_policy: f64,
    /// Task, foothold and style critics; a single critic reports in the first slot.
    pub loss_critic: [f64; 3],
    pub loss_fhat_mse: f64,
    pub loss_vhat_mse: f64,
    pub mean_level: f64,
    pub sr_window: f64,
    pub tr_window: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let vals = [
            self.p_t,
            self.mean_reward[0],
            self.mean_reward[1],
            self.mean_reward[2],
            self.loss_policy,
            self.loss_critic[0],
            self.loss_critic[1],
            self.loss_critic[2],
            self.loss_fhat_mse,
            self.loss_vhat_mse,
            self.mean_level,
            self.sr_window,
            self.tr_window,
        ];
        let mut s = self.iter.to_string();
        for v in vals {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 14 {
            return Err(Error::Parse(format!("metrics row has {} fields, expected 14", parts.len())));
        }
        let f = |i: usize| -> Result<f64> { parts[i].parse().map_err(|_| Error::Parse(format!("metrics field `{}`", parts[i]))) };
        Ok(Self {
            iter: parts[0].parse().map_err(|_| Error::Parse(format!("metrics iteration `{}`", parts[0])))?,
            p_t: f(1)?,
            mean_reward: [f(2)?, f(3)?, f(4)?],
            loss_policy: f(5)?,
            loss_critic: [f(6)?, f(7)?, f(8)?],
            loss_fhat_mse: f(9)?,
            loss_vhat_mse: f(10)?,
            mean_level: f(11)?,
            sr_window: f(12)?,
            tr_window: f(13)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    digest: u64,
    iteration: usize,
    rng: ChaCha8Rng,
    envs: Vec<EnvSnapshot>,
    opt: Optimizers,
    window: VecDeque<EpisodeResult>,
}

pub struct Trainer {
    pub setup: TrainerSetup,
    env_cfg: Arc<EnvConfig>,
    pub nets: Networks,
    opt: Optimizers,
    envs: Vec<Env>,
    inputs: Vec<EnvInputs>,
    rng: ChaCha8Rng,
    iteration: usize,
    window: VecDeque<EpisodeResult>,
    pool: Option<rayon::ThreadPool>,
    pub last_losses: LossReport,
}

/// Per-environment outcome of one rollout step.
struct StepResult {
    rewards: RewardGroups,
    done: bool,
    episode: Option<EpisodeResult>,
    inputs: EnvInputs,
}

fn build_pool(train: &TrainConfig) -> Result<Option<rayon::ThreadPool>> {
    if train.deterministic || train.threads == 1 {
        return Ok(None);
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if train.threads > 0 {
        b = b.num_threads(train.threads);
    }
    b.build().map(Some).map_err(|e| Error::Training(format!("thread pool: {e}")))
}

impl Trainer {
    pub fn new(setup: TrainerSetup) -> Result<Self> {
        setup.validate()?;
        let env_cfg = Arc::new(setup.env.clone());
        let variant = setup.train.variant;
        let nets = Networks::new(&setup.nets, &env_cfg, variant, setup.seed)?;
        let opt = Optimizers::new(&nets, &setup.ppo);
        let level = setup.curriculum.start_level.min(env_cfg.terrain.levels - 1);
        let mut envs = Vec::with_capacity(setup.train.n_envs);
        for i in 0..setup.train.n_envs {
            let family = setup.train.families[i % setup.train.families.len()];
            envs.push(Env::new(env_cfg.clone(), family, level, env_seed(setup.seed, i))?);
        }
        let inputs = envs.iter().map(EnvInputs::gather).collect();
        Ok(Self {
            pool: build_pool(&setup.train)?,
            rng: ChaCha8Rng::seed_from_u64(setup.seed ^ 0x7472_6169_6e00_0000),
            env_cfg,
            nets,
            opt,
            envs,
            inputs,
            iteration: 0,
            window: VecDeque::new(),
            last_losses: LossReport::default(),
            setup,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn schedule(&self) -> PasSchedule {
        PasSchedule::new((self.setup.train.pas_fraction * self.setup.train.iterations as f64).round() as usize)
    }

    pub fn pas_probability(&self) -> f64 {
        if self.setup.train.variant.anneals() {
            self.schedule().p(self.iteration)
        } else {
            1.0
        }
    }

    fn critic_rewards(&self, r: &RewardGroups) -> Vec<f64> {
        let scale = self.setup.ppo.reward_scale;
        let w: &RewardWeights = &self.env_cfg.rewards;
        if self.nets.critics.len() == 1 {
            vec![r.total(w) * scale]
        } else {
            r.groups().iter().map(|g| g * scale).collect()
        }
    }

    fn mix_weights(&self) -> Vec<f64> {
        if self.nets.critics.len() == 1 {
            vec![1.0]
        } else {
            self.env_cfg.rewards.groups.to_vec()
        }
    }

    fn step_envs(&mut self, actions: &[Vec<f64>]) -> Result<Vec<StepResult>> {
        let cur = self.setup.curriculum.clone();
        let levels = self.env_cfg.terrain.levels;
        let work = |(env, action): (&mut Env, &Vec<f64>)| -> Result<StepResult> {
            let tr = env.step(action)?;
            let mut episode = None;
            if tr.outcome.is_terminal() {
                let res = env.episode_result(tr.outcome);
                if cur.enabled {
                    let (level, falls) = curriculum_step(env.level, env.falls, tr.outcome, levels, cur.demote_after);
                    env.level = level;
                    env.falls = falls;
                }
                env.reset()?;
                episode = Some(res);
            }
            Ok(StepResult {
                rewards: tr.rewards,
                done: tr.outcome.is_terminal(),
                episode,
                inputs: EnvInputs::gather(env),
            })
        };
        let envs = &mut self.envs;
        let results: Vec<Result<StepResult>> = match &self.pool {
            Some(pool) => pool.install(|| envs.par_iter_mut().zip(actions.par_iter()).map(work).collect()),
            None => envs.iter_mut().zip(actions.iter()).map(work).collect(),
        };
        results.into_iter().collect()
    }

    /// Collects one rollout, updates every network and returns the metrics row.
    pub fn iterate(&mut self) -> Result<MetricsRow> {
        let n = self.envs.len();
        let horizon = self.setup.ppo.horizon;
        let p = self.pas_probability();
        let ec = self.nets.estimator.cfg.clone();
        let n_critics = self.nets.critics.len();
        let mut batch = RolloutBatch {
            n_envs: n,
            horizon,
            policy_dim: self.nets.policy_input_dim(),
            critic_dim: self.inputs[0].critic.len(),
            proprio_len: ec.history * ec.proprio_dim,
            depth_len: ec.depth_len(),
            prior_dim: ec.prior_dim,
            grid_dim: ec.grid_dim,
            rewards: vec![Vec::with_capacity(n * horizon); n_critics],
            values: vec![Vec::with_capacity(n * horizon); n_critics],
            ..Default::default()
        };
        let mut group_sums = [0.0; 3];
        for _ in 0..horizon {
            let refs: Vec<&EnvInputs> = self.inputs.iter().collect();
            let est = self.nets.estimate(&refs)?;
            let mut policy_inputs = Vec::with_capacity(n);
            for (e, inp) in self.inputs.iter().enumerate() {
                let use_est = pas_select(p, self.envs[e].rng());
                let truth: Vec<f32> = inp.prior_target.iter().map(|&v| v as f32).collect();
                let prior = if use_est { &est.prior[e] } else { &truth };
                policy_inputs.push(self.nets.policy_input(&inp.obs, prior, &est.velocity[e], &est.latent[e]));
                batch.used_estimate.push(use_est);
            }
            let (means, log_std) = self.nets.act(&policy_inputs)?;
            let mut actions32 = Vec::with_capacity(n);
            for (e, mean) in means.iter().enumerate() {
                let rng = self.envs[e].rng();
                let a: Vec<f32> = mean
                    .iter()
                    .zip(&log_std)
                    .map(|(m, s)| {
                        let z: f64 = rng.sample(StandardNormal);
                        (*m as f64 + (*s as f64).exp() * z) as f32
                    })
                    .collect();
                actions32.push(a);
            }
            let log_probs = log_probs(&self.nets, &means, &log_std, &actions32)?;
            let critic_refs: Vec<&[f32]> = self.inputs.iter().map(|i| i.critic.as_slice()).collect();
            let values = self.nets.values(&critic_refs)?;

            for (e, inp) in self.inputs.iter().enumerate() {
                batch.policy_inputs.extend_from_slice(&policy_inputs[e]);
                batch.critic_inputs.extend_from_slice(&inp.critic);
                batch.proprio.extend_from_slice(&inp.proprio);
                batch.depth.extend_from_slice(&inp.depth);
                batch.prior_targets.extend(inp.prior_target.iter().map(|&v| v as f32));
                batch.velocity_targets.extend(inp.velocity.iter().map(|&v| v as f32));
                batch.grid_targets.extend(inp.grid.iter().map(|&v| v as f32));
                batch.actions.extend_from_slice(&actions32[e]);
                batch.log_probs.push(log_probs[e]);
                for c in 0..n_critics {
                    batch.values[c].push(values[c][e] as f64);
                }
            }

            let actions: Vec<Vec<f64>> = actions32.iter().map(|a| a.iter().map(|&v| v as f64).collect()).collect();
            let results = self.step_envs(&actions)?;
            for r in results.iter() {
                for (s, g) in group_sums.iter_mut().zip(r.rewards.groups()) {
                    *s += g;
                }
                for (c, v) in self.critic_rewards(&r.rewards).into_iter().enumerate() {
                    batch.rewards[c].push(v);
                }
                batch.dones.push(r.done);
                if let Some(ep) = r.episode {
                    self.window.push_back(ep);
                    while self.window.len() > self.setup.train.stats_window.max(1) {
                        self.window.pop_front();
                    }
                }
            }
            self.inputs = results.into_iter().map(|r| r.inputs).collect();
        }
        let critic_refs: Vec<&[f32]> = self.inputs.iter().map(|i| i.critic.as_slice()).collect();
        batch.last_values = self
            .nets
            .values(&critic_refs)?
            .into_iter()
            .map(|v| v.into_iter().map(f64::from).collect())
            .collect();

        let (advs, targets) = batch_gae(&batch, self.setup.ppo.gamma, self.setup.ppo.lambda);
        let mixed = mix_advantages(&advs, &self.mix_weights());
        let losses = ppo_update(&mut self.nets, &mut self.opt, &batch, &mixed, &targets, &self.setup.ppo, &mut self.rng)?;
        if let Some(msg) = &losses.aborted {
            eprintln!("iteration {}: update skipped, {msg}", self.iteration);
        }

        let rows = (n * horizon) as f64;
        let mut loss_critic = [f64::NAN; 3];
        for (slot, l) in loss_critic.iter_mut().zip(&losses.critics) {
            *slot = *l;
        }
        let (sr, tr) = self.window_rates();
        let row = MetricsRow {
            iter: self.iteration,
            p_t: p,
            mean_reward: group_sums.map(|s| s / rows),
            loss_policy: losses.policy,
            loss_critic,
            loss_fhat_mse: losses.fhat_mse,
            loss_vhat_mse: losses.vhat_mse,
            mean_level: self.envs.iter().map(|e| e.level as f64).sum::<f64>() / n as f64,
            sr_window: sr,
            tr_window: tr,
        };
        self.last_losses = losses;
        self.iteration += 1;
        Ok(row)
    }

    /// Success and traverse rates over the recent-episode window.
    pub fn window_rates(&self) -> (f64, f64) {
        if self.window.is_empty() {
            return (0.0, 0.0);
        }
        let k = self.window.len() as f64;
        let sr = self.window.iter().filter(|r| r.outcome == Outcome::Finished).count() as f64 / k;
        let tr = self.window.iter().map(|r| r.progress).sum::<f64>() / k;
        (sr, tr)
    }

    /// Writes `<stem>.puma` (parameters) and `<stem>.state` (everything else needed to
    /// continue bit-identically).
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let ckpt_path = stem.with_extension("puma");
        self.nets
            .checkpoint(self.iteration as u64)
            .save(&ckpt_path)
            .map_err(|e| Error::Training(format!("writing {}: {e}", ckpt_path.display())))?;
        let state = TrainerState {
            digest: self.setup.digest(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            envs: self.envs.iter().map(Env::snapshot).collect(),
            opt: self.opt.clone(),
            window: self.window.clone(),
        };
        let bytes = bincode::serialize(&state).map_err(|e| Error::Training(format!("encoding trainer state: {e}")))?;
        let state_path = stem.with_extension("state");
        fs::write(&state_path, bytes).map_err(crate::error::io_err(format!("writing {}", state_path.display())))?;
        Ok(ckpt_path)
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(setup: TrainerSetup, checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(setup)?;
        let ckpt = Checkpoint::load(checkpoint)?;
        let iteration = t.nets.load_checkpoint(&ckpt)? as usize;
        let state_path = checkpoint.with_extension("state");
        let bytes = fs::read(&state_path).map_err(crate::error::io_err(format!("reading {}", state_path.display())))?;
        let state: TrainerState = bincode::deserialize(&bytes).map_err(|e| Error::Parse(format!("trainer state: {e}")))?;
        if state.digest != t.setup.digest() {
            return Err(Error::Config("checkpoint was written by a run with a different configuration".into()));
        }
        if state.iteration != iteration || state.envs.len() != t.envs.len() {
            return Err(Error::Config("checkpoint and trainer state disagree".into()));
        }
        t.envs = state
            .envs
            .into_iter()
            .map(|s| Env::restore(t.env_cfg.clone(), s))
            .collect::<Result<_>>()?;
        t.inputs = t.envs.iter().map(EnvInputs::gather).collect();
        t.opt = state.opt;
        t.rng = state.rng;
        t.window = state.window;
        t.iteration = iteration;
        Ok(t)
    }
}

/// Log density of sampled actions under the current policy, computed with the same
/// graph operations as the update so the first ratio is exactly one.
fn log_probs(nets: &Networks, means: &[Vec<f32>], log_std: &[f32], actions: &[Vec<f32>]) -> Result<Vec<f32>> {
    let n = means.len();
    let flat = |v: &[Vec<f32>]| v.iter().flatten().copied().collect::<Vec<f32>>();
    let mut g = Graph::new();
    let m = g.constant(Tensor::new(&[n, ACTION_DIM], flat(means))?);
    let s = g.constant(Tensor::new(&[ACTION_DIM], log_std.to_vec())?);
    let a = g.constant(Tensor::new(&[n, ACTION_DIM], flat(actions))?);
    let lp = nets.policy.log_prob(&mut g, m, s, a)?;
    Ok(g.value(lp).data().to_vec())
}
