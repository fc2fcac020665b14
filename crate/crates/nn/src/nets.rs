//! The estimator, actor and critics.
//!
//! The estimator encodes the depth stack with a strided conv stack into one token,
//! projects each proprioceptive history frame into a token, mixes all tokens with
//! self-attention and summarizes them with a GRU. MLP heads read the final GRU state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Activation, Conv2d, Gru, Init, Linear, Mlp, SelfAttention};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub proprio_dim: usize,
    pub history: usize,
    pub depth_frames: usize,
    pub depth_height: usize,
    pub depth_width: usize,
    pub conv_channels: Vec<usize>,
    pub token_dim: usize,
    pub heads: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub prior_dim: usize,
    pub velocity_dim: usize,
    pub latent_dim: usize,
    /// Width of the height grid reconstructed from the latent.
    pub grid_dim: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            proprio_dim: 45,
            history: 10,
            depth_frames: 2,
            depth_height: 48,
            depth_width: 64,
            conv_channels: vec![8, 16, 16],
            token_dim: 64,
            heads: 4,
            gru_hidden: 128,
            head_hidden: 64,
            prior_dim: 4,
            velocity_dim: 3,
            latent_dim: 64,
            grid_dim: 77,
        }
    }
}

impl EstimatorConfig {
    /// Spatial size after the stride-2 conv stack.
    pub fn conv_out(&self) -> (usize, usize) {
        let mut h = self.depth_height;
        let mut w = self.depth_width;
        for _ in &self.conv_channels {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }

    pub fn depth_len(&self) -> usize {
        self.depth_frames * self.depth_height * self.depth_width
    }
}

pub struct Estimator {
    pub cfg: EstimatorConfig,
    convs: Vec<Conv2d>,
    depth_proj: Linear,
    proprio_proj: Linear,
    attention: SelfAttention,
    gru: Gru,
    prior_head: Mlp,
    velocity_head: Mlp,
    latent_head: Mlp,
    decoder: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct EstimatorOut {
    pub prior: Var,
    pub velocity: Var,
    pub latent: Var,
}

impl Estimator {
    /// Registers parameters under `name`. `zero_heads` zero-initializes the head outputs.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EstimatorConfig,
        zero_heads: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.conv_channels.is_empty() || cfg.history == 0 || cfg.depth_frames == 0 {
            return Err(NnError::InvalidArgument {
                op: "estimator",
                msg: "needs at least one conv layer, history frame and depth frame".into(),
            });
        }
        let mut convs = Vec::new();
        let mut ch = cfg.depth_frames;
        for (i, &out) in cfg.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), ch, out, 3, 2, 1, rng)?);
            ch = out;
        }
        let (h, w) = cfg.conv_out();
        let d = cfg.token_dim;
        let head_init = if zero_heads { Init::Zeros } else { Init::Scaled(0.1) };
        let head = |store: &mut ParamStore<T>, n: &str, out: usize, rng: &mut R| {
            Mlp::new(store, &format!("{name}.{n}"), &[cfg.gru_hidden, cfg.head_hidden, out], Activation::Elu, head_init, rng)
        };
        let prior_head = head(store, "prior_head", cfg.prior_dim, rng)?;
        let velocity_head = head(store, "velocity_head", cfg.velocity_dim, rng)?;
        let latent_head = head(store, "latent_head", cfg.latent_dim, rng)?;
        Ok(Self {
            depth_proj: Linear::new(store, &format!("{name}.depth_proj"), ch * h * w, d, Init::Scaled(2f64.sqrt()), rng)?,
            proprio_proj: Linear::new(store, &format!("{name}.proprio_proj"), cfg.proprio_dim, d, Init::Scaled(2f64.sqrt()), rng)?,
            attention: SelfAttention::new(store, &format!("{name}.attention"), d, cfg.heads, rng)?,
            gru: Gru::new(store, &format!("{name}.gru"), d, cfg.gru_hidden, rng)?,
            prior_head,
            velocity_head,
            latent_head,
            decoder: Mlp::new(
                store,
                &format!("{name}.decoder"),
                &[cfg.latent_dim, 128, cfg.grid_dim],
                Activation::Elu,
                Init::Scaled(0.1),
                rng,
            )?,
            convs,
            cfg: cfg.clone(),
        })
    }

    /// `proprio: [B, history, proprio_dim]`, `depth: [B, frames, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, proprio: Var, depth: Var) -> Result<EstimatorOut> {
        let c = &self.cfg;
        let sp = g.shape(proprio).to_vec();
        let sd = g.shape(depth).to_vec();
        if sp.len() != 3 || sp[1] != c.history || sp[2] != c.proprio_dim {
            return Err(NnError::ShapeMismatch {
                op: "estimator proprio",
                lhs: sp,
                rhs: vec![0, c.history, c.proprio_dim],
            });
        }
        let batch = sp[0];
        if sd != [batch, c.depth_frames, c.depth_height, c.depth_width] {
            return Err(NnError::ShapeMismatch {
                op: "estimator depth",
                lhs: sd,
                rhs: vec![batch, c.depth_frames, c.depth_height, c.depth_width],
            });
        }
        let mut x = depth;
        for conv in &self.convs {
            x = conv.forward(g, store, x)?;
            x = g.elu(x);
        }
        let flat = g.value(x).numel() / batch;
        let x = g.reshape(x, &[batch, flat])?;
        let depth_token = self.depth_proj.forward(g, store, x)?;
        let depth_token = g.elu(depth_token);
        let depth_token = g.reshape(depth_token, &[batch, 1, c.token_dim])?;
        let tokens = self.proprio_proj.forward(g, store, proprio)?;
        let tokens = g.elu(tokens);
        let tokens = g.concat(&[tokens, depth_token], 1)?;
        let mixed = self.attention.forward(g, store, tokens)?;
        let h = self.gru.forward_seq(g, store, mixed)?;
        Ok(EstimatorOut {
            prior: self.prior_head.forward(g, store, h)?,
            velocity: self.velocity_head.forward(g, store, h)?,
            latent: self.latent_head.forward(g, store, h)?,
        })
    }

    /// Reconstructs the height grid from the latent.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, latent: Var) -> Result<Var> {
        self.decoder.forward(g, store, latent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub action_dim: usize,
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            input_dim: 45 + 4 + 3 + 64,
            hidden: vec![256, 128, 64],
            action_dim: 12,
            init_std: 0.5,
        }
    }
}

/// Gaussian actor with a state-independent log standard deviation.
pub struct Policy {
    pub mlp: Mlp,
    pub log_std: ParamId,
    pub action_dim: usize,
}

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;

impl Policy {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &PolicyConfig, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![cfg.input_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.action_dim);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), &sizes, Activation::Elu, Init::Scaled(0.01), rng)?;
        let log_std = store.add(
            &format!("{name}.log_std"),
            Tensor::full(&[cfg.action_dim], T::of(cfg.init_std.ln())),
        )?;
        Ok(Self {
            mlp,
            log_std,
            action_dim: cfg.action_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Returns `(mean [B, A], log_std [A])`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let mean = self.mlp.forward(g, store, x)?;
        Ok((mean, g.param(store, self.log_std)))
    }

    /// Per-row Gaussian log density of `actions [B, A]`, shape `[B]`.
    pub fn log_prob<T: Real>(&self, g: &mut Graph<T>, mean: Var, log_std: Var, actions: Var) -> Result<Var> {
        let diff = g.sub(actions, mean)?;
        let neg = g.scale(log_std, -1.0);
        let inv_std = g.exp(neg);
        let z = g.mul_row(diff, inv_std)?;
        let sq = g.square(z);
        let quad = g.sum_last(sq);
        let quad = g.scale(quad, -0.5);
        let norm = g.sum(log_std);
        let norm = g.add_scalar(norm, 0.5 * self.action_dim as f64 * LOG_2PI);
        let norm = g.scale(norm, -1.0);
        let norm = g.reshape(norm, &[1])?;
        let rows = g.shape(quad)[0];
        let lp = g.add_row(quad, norm)?;
        g.reshape(lp, &[rows])
    }

    /// Differential entropy of the diagonal Gaussian (scalar).
    pub fn entropy<T: Real>(&self, g: &mut Graph<T>, log_std: Var) -> Var {
        let s = g.sum(log_std);
        g.add_scalar(s, 0.5 * self.action_dim as f64 * (1.0 + LOG_2PI))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            input_dim: 60 + 77 + 4,
            hidden: vec![256, 128],
        }
    }
}

pub struct Critic {
    pub mlp: Mlp,
}

impl Critic {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &CriticConfig, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![cfg.input_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        Ok(Self {
            mlp: Mlp::new(store, name, &sizes, Activation::Elu, Init::Scaled(1.0), rng)?,
        })
    }

    /// `[B, input] -> [B]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let v = self.mlp.forward(g, store, x)?;
        let rows = g.shape(v)[0];
        g.reshape(v, &[rows])
    }
}
