//! The estimator, actor and critics of one training run, plus the input vectors
//! they read.

use puma_nn::{Checkpoint, Critic, CriticConfig, Estimator, EstimatorConfig, Graph, ParamStore, Policy, PolicyConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::rl::variant::Variant;
use crate::sensors::{layout, OBS_DIM, PRIV_DIM};

/// Network sizes that are not fixed by the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetsConfig {
    pub conv_channels: Vec<usize>,
    pub token_dim: usize,
    pub heads: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub latent_dim: usize,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub init_std: f64,
}

impl Default for NetsConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16, 16],
            token_dim: 64,
            heads: 4,
            gru_hidden: 128,
            head_hidden: 64,
            latent_dim: 64,
            policy_hidden: vec![256, 128, 64],
            critic_hidden: vec![256, 128],
            init_std: 0.15,
        }
    }
}

impl NetsConfig {
    pub fn estimator(&self, env: &EnvConfig, variant: Variant) -> EstimatorConfig {
        EstimatorConfig {
            proprio_dim: OBS_DIM,
            history: env.history,
            depth_frames: env.camera.history,
            depth_height: env.camera.height,
            depth_width: env.camera.width,
            conv_channels: self.conv_channels.clone(),
            token_dim: self.token_dim,
            heads: self.heads,
            gru_hidden: self.gru_hidden,
            head_hidden: self.head_hidden,
            prior_dim: variant.prior_kind().dim(),
            velocity_dim: 3,
            latent_dim: self.latent_dim,
            grid_dim: env.grid.len(),
        }
    }

    pub fn policy_input_dim(&self, variant: Variant) -> usize {
        let prior = if variant.prior_to_policy() { variant.prior_kind().dim() } else { 0 };
        OBS_DIM + prior + 3 + self.latent_dim
    }

    pub fn critic_input_dim(&self, env: &EnvConfig, variant: Variant) -> usize {
        PRIV_DIM + env.grid.len() + variant.prior_kind().dim()
    }
}

/// Fixed per-block input scaling so every observation block is of order one.
pub fn scale_observation(o: &[f64]) -> impl Iterator<Item = f32> + '_ {
    o.iter().enumerate().map(|(i, &v)| {
        let s = if layout::OMEGA.contains(&i) {
            0.25
        } else if layout::FOOT_OFFSET.contains(&i) {
            5.0
        } else if layout::FOOT_VEL.contains(&i) {
            0.1
        } else {
            1.0
        };
        (v * s) as f32
    })
}

pub const CRITIC_NAMES: [&str; 3] = ["critic_task", "critic_foothold", "critic_style"];
pub const SINGLE_CRITIC_NAME: &str = "critic_total";

pub fn critic_names(variant: Variant) -> Vec<&'static str> {
    if variant.critics() == 1 {
        vec![SINGLE_CRITIC_NAME]
    } else {
        CRITIC_NAMES.to_vec()
    }
}

/// What one environment contributes to a network batch at one step.
#[derive(Clone, Debug)]
pub struct EnvInputs {
    pub proprio: Vec<f32>,
    pub depth: Vec<f32>,
    pub obs: Vec<f32>,
    pub critic: Vec<f32>,
    pub prior_target: Vec<f64>,
    pub velocity: [f64; 3],
    pub grid: Vec<f64>,
}

impl EnvInputs {
    pub fn gather(env: &Env) -> Self {
        let obs: Vec<f64> = env.observation().to_vec();
        let history: Vec<f64> = env.proprio_history().collect();
        let prior_target = env.prior_target();
        let grid = env.height_grid();
        let privileged = env.privileged();
        let mut critic: Vec<f32> = scale_observation(&privileged[..OBS_DIM]).collect();
        critic.extend(privileged[OBS_DIM..].iter().map(|&v| v as f32));
        critic.extend(grid.iter().map(|&v| v as f32));
        critic.extend(prior_target.iter().map(|&v| v as f32));
        Self {
            proprio: scale_observation(&history).collect(),
            depth: env.depth_stack(),
            obs: scale_observation(&obs).collect(),
            critic,
            prior_target,
            velocity: env.state().body_velocity().into(),
            grid,
        }
    }
}

pub fn stack_rows(rows: &[&[f32]], shape_tail: &[usize]) -> Result<Tensor<f32>> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(shape_tail);
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(&shape, data)?)
}

/// Estimator outputs for a batch, one row per environment.
#[derive(Clone, Debug, Default)]
pub struct Estimates {
    pub prior: Vec<Vec<f32>>,
    pub velocity: Vec<Vec<f32>>,
    pub latent: Vec<Vec<f32>>,
}

pub struct Networks {
    pub variant: Variant,
    pub estimator: Estimator,
    pub policy: Policy,
    pub critics: Vec<Critic>,
    pub estimator_store: ParamStore<f32>,
    pub policy_store: ParamStore<f32>,
    pub critic_stores: Vec<ParamStore<f32>>,
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let n = t.shape()[0];
    let w = t.numel() / n.max(1);
    t.data().chunks(w.max(1)).map(<[f32]>::to_vec).collect()
}

impl Networks {
    pub fn new(nets: &NetsConfig, env: &EnvConfig, variant: Variant, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7473_0000_0000);
        let mut estimator_store = ParamStore::new();
        let estimator = Estimator::new(&mut estimator_store, "estimator", &nets.estimator(env, variant), false, &mut rng)?;
        let mut policy_store = ParamStore::new();
        let pcfg = PolicyConfig {
            input_dim: nets.policy_input_dim(variant),
            hidden: nets.policy_hidden.clone(),
            action_dim: crate::sim::ACTION_DIM,
            init_std: nets.init_std,
        };
        let policy = Policy::new(&mut policy_store, "policy", &pcfg, &mut rng)?;
        let ccfg = CriticConfig {
            input_dim: nets.critic_input_dim(env, variant),
            hidden: nets.critic_hidden.clone(),
        };
        let mut critics = Vec::new();
        let mut critic_stores = Vec::new();
        for name in critic_names(variant) {
            let mut store = ParamStore::new();
            critics.push(Critic::new(&mut store, name, &ccfg, &mut rng)?);
            critic_stores.push(store);
        }
        Ok(Self {
            variant,
            estimator,
            policy,
            critics,
            estimator_store,
            policy_store,
            critic_stores,
        })
    }

    pub fn policy_input_dim(&self) -> usize {
        self.policy.input_dim()
    }

    /// Runs the estimator on a batch of gathered inputs.
    pub fn estimate(&self, inputs: &[&EnvInputs]) -> Result<Estimates> {
        if inputs.is_empty() {
            return Ok(Estimates::default());
        }
        let c = &self.estimator.cfg;
        let proprio: Vec<&[f32]> = inputs.iter().map(|i| i.proprio.as_slice()).collect();
        let depth: Vec<&[f32]> = inputs.iter().map(|i| i.depth.as_slice()).collect();
        let mut g = Graph::new();
        let p = g.constant(stack_rows(&proprio, &[c.history, c.proprio_dim])?);
        let d = g.constant(stack_rows(&depth, &[c.depth_frames, c.depth_height, c.depth_width])?);
        let out = self.estimator.forward(&mut g, &self.estimator_store, p, d)?;
        Ok(Estimates {
            prior: rows(g.value(out.prior)),
            velocity: rows(g.value(out.velocity)),
            latent: rows(g.value(out.latent)),
        })
    }

    /// `[o_t, f_input, v_hat, z_hat]`, with `f_input` dropped when the variant hides it.
    pub fn policy_input(&self, obs: &[f32], prior: &[f32], velocity: &[f32], latent: &[f32]) -> Vec<f32> {
        let mut x = Vec::with_capacity(self.policy_input_dim());
        x.extend_from_slice(obs);
        if self.variant.prior_to_policy() {
            x.extend_from_slice(prior);
        }
        x.extend_from_slice(velocity);
        x.extend_from_slice(latent);
        x
    }

    /// Action means and the shared log standard deviation.
    pub fn act(&self, inputs: &[Vec<f32>]) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
        let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let x = g.constant(stack_rows(&refs, &[self.policy_input_dim()])?);
        let (mean, log_std) = self.policy.forward(&mut g, &self.policy_store, x)?;
        Ok((rows(g.value(mean)), g.value(log_std).data().to_vec()))
    }

    /// Value of each critic for each row of `inputs`.
    pub fn values(&self, inputs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let width = inputs.first().map_or(0, |r| r.len());
        let t = stack_rows(inputs, &[width])?;
        let mut out = Vec::new();
        for (critic, store) in self.critics.iter().zip(&self.critic_stores) {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let v = critic.forward(&mut g, store, x)?;
            out.push(g.value(v).data().to_vec());
        }
        Ok(out)
    }

    pub fn checkpoint(&self, iteration: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.push_params(&self.estimator_store);
        ckpt.push_params(&self.policy_store);
        for s in &self.critic_stores {
            ckpt.push_params(s);
        }
        ckpt.push_counter("meta.iteration", iteration);
        ckpt.push_counter("meta.variant", Variant::ALL.iter().position(|v| *v == self.variant).unwrap_or(0) as u64);
        ckpt
    }

    /// Loads all parameters and returns the stored iteration.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<u64> {
        let stored = ckpt.counter("meta.variant")? as usize;
        if Variant::ALL.get(stored) != Some(&self.variant) {
            return Err(Error::Config(format!(
                "checkpoint was trained as variant `{}`, configured `{}`",
                Variant::ALL.get(stored).map_or("?", |v| v.name()),
                self.variant
            )));
        }
        ckpt.load_params(&mut self.estimator_store)?;
        ckpt.load_params(&mut self.policy_store)?;
        for s in &mut self.critic_stores {
            ckpt.load_params(s)?;
        }
        Ok(ckpt.counter("meta.iteration")?)
    }
}
