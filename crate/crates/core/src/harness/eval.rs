//! Success rate, traverse rate and foothold-regression error on terrain presets.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use puma_nn::Checkpoint;

use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig};
use crate::error::{io_err, Error, Result};
use crate::harness::config::RunConfig;
use crate::rl::agent::{EnvInputs, Networks};
use crate::rl::trainer::env_seed;
use crate::sim::{self, Outcome, ACTION_DIM};
use crate::terrain::{generate, TerrainFamily, TerrainSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub family: TerrainFamily,
    pub level: usize,
    pub inclination: Option<f64>,
}

/// Parses `family[-incl][:level]`, e.g. `stepping-stones:2` or `wall-gap-80`.
/// Without a level, terrain presets use the hardest level and `flat` uses 0.
pub fn parse_preset(name: &str, levels: usize) -> Result<Preset> {
    let (base, level) = match name.split_once(':') {
        Some((b, l)) => (b, Some(l.parse::<usize>().map_err(|_| Error::Config(format!("preset `{name}`: bad level `{l}`")))?)),
        None => (name, None),
    };
    let (family_name, inclination) = match base.rsplit_once('-') {
        Some((f, deg)) if deg.chars().all(|c| c.is_ascii_digit()) && !deg.is_empty() => (f, Some(deg.parse::<f64>().expect("digits"))),
        _ => (base, None),
    };
    let family: TerrainFamily = family_name
        .parse()
        .map_err(|_| Error::Config(format!("unknown preset `{name}`")))?;
    if inclination.is_some() && family != TerrainFamily::WallAssistedGap && family != TerrainFamily::Surmounting {
        return Err(Error::Config(format!("preset `{name}`: only wall terrains take an inclination")));
    }
    let top = levels.saturating_sub(1);
    let level = level.unwrap_or(if family == TerrainFamily::Flat { 0 } else { top });
    if level > top {
        return Err(Error::Config(format!("preset `{name}`: level {level} exceeds {top}")));
    }
    Ok(Preset {
        name: name.to_string(),
        family,
        level,
        inclination,
    })
}

/// One control decision for every active environment.
pub struct AgentStep {
    pub actions: Vec<[f64; ACTION_DIM]>,
    /// Estimated foothold targets, when the agent has an estimator.
    pub estimates: Option<Vec<Vec<f64>>>,
}

pub trait Agent {
    fn act(&mut self, envs: &[&Env], inputs: &[EnvInputs]) -> Result<AgentStep>;
}

/// Deterministic policy: the action mean with the estimated prior always selected.
pub struct PolicyAgent<'a> {
    pub nets: &'a Networks,
}

impl Agent for PolicyAgent<'_> {
    fn act(&mut self, _envs: &[&Env], inputs: &[EnvInputs]) -> Result<AgentStep> {
        let refs: Vec<&EnvInputs> = inputs.iter().collect();
        let est = self.nets.estimate(&refs)?;
        let x: Vec<Vec<f32>> = inputs
            .iter()
            .enumerate()
            .map(|(e, i)| self.nets.policy_input(&i.obs, &est.prior[e], &est.velocity[e], &est.latent[e]))
            .collect();
        let (means, _) = self.nets.act(&x)?;
        Ok(AgentStep {
            actions: means.iter().map(|m| std::array::from_fn(|k| m[k] as f64)).collect(),
            estimates: Some(est.prior.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect()),
        })
    }
}

/// Open-loop trot that walks until the base passes `stop_fraction` of the lane and
/// then stands still. Reports the exact prior as its estimate.
pub struct ScriptedTrot {
    pub stop_fraction: f64,
    pub freq: f64,
    pub stride: f64,
    pub lift: f64,
}

impl Default for ScriptedTrot {
    fn default() -> Self {
        Self {
            stop_fraction: 2.0,
            freq: 4.0,
            stride: 1.0,
            lift: 1.0,
        }
    }
}

impl Agent for ScriptedTrot {
    fn act(&mut self, envs: &[&Env], inputs: &[EnvInputs]) -> Result<AgentStep> {
        let actions = envs
            .iter()
            .map(|env| {
                let t = env.terrain();
                let stop = t.start_x + self.stop_fraction * t.lane_progress_length();
                let desired = if env.state().pos.x >= stop {
                    [0.0; ACTION_DIM]
                } else {
                    sim::trot_action(env.gait_time(), self.freq, self.stride, self.lift)
                };
                env.action_for_target(&desired)
            })
            .collect();
        Ok(AgentStep {
            actions,
            estimates: Some(inputs.iter().map(|i| i.prior_target.clone()).collect()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: Preset,
    pub trials: usize,
    pub sr: f64,
    pub tr: f64,
    /// Mean squared foothold-regression error over all steps and components.
    pub mse_raw: f64,
    /// Per-component squared error divided by the target variance, averaged.
    pub mse_normalized: f64,
    pub mean_episode_length: f64,
    /// Mean per-step foothold-group reward.
    pub mean_reward_foothold: f64,
    pub mean_reward_task: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub presets: Vec<PresetReport>,
    pub config_digest: String,
    pub checkpoint_id: String,
}

pub const REPORT_HEADER: &str =
    "preset,family,level,trials,sr,tr,mse_raw,mse_normalized,mean_episode_length,mean_reward_foothold,mean_reward_task,config_digest,checkpoint_id";

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{REPORT_HEADER}")?;
        for p in &self.presets {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.preset.name,
                p.preset.family.name(),
                p.preset.level,
                p.trials,
                p.sr,
                p.tr,
                p.mse_raw,
                p.mse_normalized,
                p.mean_episode_length,
                p.mean_reward_foothold,
                p.mean_reward_task,
                self.config_digest,
                self.checkpoint_id
            )?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct ErrorStats {
    n: usize,
    sq_err: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl ErrorStats {
    fn add(&mut self, estimate: &[f64], target: &[f64]) {
        if self.sq_err.is_empty() {
            self.sq_err = vec![0.0; target.len()];
            self.sum = vec![0.0; target.len()];
            self.sum_sq = vec![0.0; target.len()];
        }
        self.n += 1;
        for k in 0..target.len() {
            self.sq_err[k] += (estimate[k] - target[k]).powi(2);
            self.sum[k] += target[k];
            self.sum_sq[k] += target[k] * target[k];
        }
    }

    fn finish(&self) -> (f64, f64) {
        if self.n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let n = self.n as f64;
        let k = self.sq_err.len() as f64;
        let raw = self.sq_err.iter().sum::<f64>() / (n * k);
        let norm = (0..self.sq_err.len())
            .map(|i| {
                let mean = self.sum[i] / n;
                let var = (self.sum_sq[i] / n - mean * mean).max(1e-12);
                self.sq_err[i] / n / var
            })
            .sum::<f64>()
            / k;
        (raw, norm)
    }
}

/// Per-step trajectory records of the first trial, if requested.
pub type Trajectory = Vec<Vec<f64>>;

/// Runs `trials` episodes of `preset`, `parallel` at a time, at the configured
/// command. Trial `i` uses terrain and noise seeds derived from `(seed, i)`.
pub fn evaluate_preset(
    cfg: &EnvConfig,
    agent: &mut dyn Agent,
    preset: &Preset,
    trials: usize,
    parallel: usize,
    seed: u64,
    mut trajectory: Option<&mut Trajectory>,
) -> Result<PresetReport> {
    if trials == 0 {
        return Err(Error::Config("evaluation needs at least one trial".into()));
    }
    let cfg = Arc::new(cfg.clone());
    let mut finished = 0usize;
    let mut progress = 0.0;
    let mut lengths = 0usize;
    let mut stats = ErrorStats::default();
    let mut reward_sums = [0.0; 2];
    let mut reward_steps = 0usize;
    let mut next_trial = 0usize;
    while next_trial < trials {
        let count = parallel.max(1).min(trials - next_trial);
        let mut envs = Vec::with_capacity(count);
        for i in next_trial..next_trial + count {
            let s = env_seed(seed, i);
            let spec = TerrainSpec {
                inclination_override: preset.inclination,
                ..TerrainSpec::new(preset.family, preset.level, s)
            };
            let terrain = generate(&cfg.terrain, &spec)?;
            envs.push(Env::with_terrain(cfg.clone(), terrain, s)?);
        }
        let first_batch = next_trial == 0;
        let mut active: Vec<bool> = vec![true; count];
        while active.iter().any(|&a| a) {
            let idx: Vec<usize> = (0..count).filter(|&e| active[e]).collect();
            let inputs: Vec<EnvInputs> = idx.iter().map(|&e| EnvInputs::gather(&envs[e])).collect();
            let refs: Vec<&Env> = idx.iter().map(|&e| &envs[e]).collect();
            let step = agent.act(&refs, &inputs)?;
            if let Some(est) = &step.estimates {
                for (e, inp) in est.iter().zip(&inputs) {
                    stats.add(e, &inp.prior_target);
                }
            }
            for (k, &e) in idx.iter().enumerate() {
                let tr = envs[e].step(&step.actions[k])?;
                reward_sums[0] += tr.rewards.foothold();
                reward_sums[1] += tr.rewards.task();
                reward_steps += 1;
                if first_batch && e == 0 {
                    if let Some(traj) = trajectory.as_deref_mut() {
                        let env = &envs[e];
                        traj.push(sim::traj_record(env.steps(), env.steps() as f64 * cfg.sim.control_dt(), env.state(), env.track().cursor()));
                    }
                }
                if tr.outcome.is_terminal() {
                    active[e] = false;
                    let res = envs[e].episode_result(tr.outcome);
                    if res.outcome == Outcome::Finished {
                        finished += 1;
                    }
                    progress += res.progress;
                    lengths += res.steps;
                }
            }
        }
        next_trial += count;
    }
    let (mse_raw, mse_normalized) = stats.finish();
    let n = trials as f64;
    let rs = reward_steps.max(1) as f64;
    Ok(PresetReport {
        preset: preset.clone(),
        trials,
        sr: finished as f64 / n,
        tr: progress / n,
        mse_raw,
        mse_normalized,
        mean_episode_length: lengths as f64 / n,
        mean_reward_foothold: reward_sums[0] / rs,
        mean_reward_task: reward_sums[1] / rs,
    })
}

/// Short hexadecimal identifier of a byte string.
pub fn short_id(bytes: &[u8]) -> String {
    format!("{:016x}", crate::rl::trainer::fnv1a(bytes))
}

/// Loads trained networks for `cfg` and returns them with the checkpoint's identifier.
pub fn load_policy(cfg: &RunConfig, path: &Path) -> Result<(Networks, String)> {
    let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    let ckpt = Checkpoint::read_from(bytes.as_slice())?;
    let mut nets = Networks::new(&cfg.nets, &cfg.env_config(), cfg.train.variant, cfg.seed)?;
    nets.load_checkpoint(&ckpt)?;
    Ok((nets, short_id(&bytes)))
}

/// Evaluates `agent` on every preset. The trajectory of the first trial of the first
/// preset is recorded when requested.
pub fn evaluate(
    cfg: &RunConfig,
    agent: &mut dyn Agent,
    presets: &[String],
    trials: usize,
    seed: u64,
    checkpoint_id: &str,
    mut trajectory: Option<&mut Trajectory>,
) -> Result<EvalReport> {
    let env = cfg.env_config();
    let mut reports = Vec::new();
    for (k, name) in presets.iter().enumerate() {
        let preset = parse_preset(name, cfg.terrain.levels)?;
        let traj = if k == 0 { trajectory.as_deref_mut() } else { None };
        reports.push(evaluate_preset(&env, agent, &preset, trials, cfg.eval.parallel, seed, traj)?);
    }
    Ok(EvalReport {
        presets: reports,
        config_digest: format!("{:016x}", cfg.digest()),
        checkpoint_id: checkpoint_id.to_string(),
    })
}
