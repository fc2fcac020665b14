//! One locomotion episode: terrain lane, foothold track, robot, depth stream and the
//! observation histories the networks read.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foothold::{build_track, FootholdConfig, FootholdTrack, PolarPrior};
use crate::rl::rewards::{compute_rewards, RewardGroups, RewardInputs, RewardWeights};
use crate::sensors::{
    assemble_observation, cartesian_targets, height_grid, privileged_state, render_depth, CameraConfig, CameraPose,
    DepthPipeline, NoiseConfig, OBS_DIM, PRIV_DIM,
};
use crate::sim::{self, EpisodeConfig, Outcome, RobotState, SimConfig, ACTION_DIM, NUM_FEET};
use crate::terrain::{edge_distance, generate, EdgeDistanceField, GridSpec, Terrain, TerrainConfig, TerrainFamily, TerrainSpec};

/// What the estimator regresses and the critic receives as the foothold target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `(d_L, d_R, psi_t, psi_next)`.
    Polar,
    /// `(psi_t, psi_next)`.
    YawOnly,
    /// Base-frame `p_t`, `p_{t+1}`.
    Cartesian,
}

impl PriorKind {
    pub fn dim(self) -> usize {
        match self {
            PriorKind::Polar => 4,
            PriorKind::YawOnly => 2,
            PriorKind::Cartesian => 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub terrain: TerrainConfig,
    pub foothold: FootholdConfig,
    pub sim: SimConfig,
    pub episode: EpisodeConfig,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
    pub rewards: RewardWeights,
    pub grid: GridSpec,
    /// Proprioceptive history length.
    pub history: usize,
    pub prior: PriorKind,
    /// Skip depth rendering (agents that never read it).
    pub render: bool,
    pub gait: GaitConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            terrain: TerrainConfig::default(),
            foothold: FootholdConfig::default(),
            sim: SimConfig::default(),
            episode: EpisodeConfig::default(),
            camera: CameraConfig::default(),
            noise: NoiseConfig::default(),
            rewards: RewardWeights::default(),
            grid: GridSpec::default(),
            history: 10,
            prior: PriorKind::Polar,
            render: true,
            gait: GaitConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.camera.validate()?;
        if self.gait.enabled && !(self.gait.residual > 0.0 && self.gait.freq > 0.0) {
            return Err(Error::Config("reference gait needs positive frequency and residual scale".into()));
        }
        if self.history == 0 {
            return Err(Error::Config("proprioceptive history must be at least 1".into()));
        }
        if self.terrain.levels == 0 {
            return Err(Error::Config("terrain needs at least one level".into()));
        }
        Ok(())
    }
}

/// Reference trot added under the policy action. With `enabled`, the foot targets
/// sent to the simulator are `clamp(trot(t) + residual * action)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitConfig {
    pub enabled: bool,
    pub freq: f64,
    pub stride: f64,
    pub lift: f64,
    pub residual: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            freq: 4.0,
            stride: 1.0,
            lift: 1.0,
            residual: 1.0,
        }
    }
}

impl GaitConfig {
    pub fn reference(&self, time: f64) -> [f64; ACTION_DIM] {
        if self.enabled {
            sim::trot_action(time, self.freq, self.stride, self.lift)
        } else {
            [0.0; ACTION_DIM]
        }
    }
}

/// Result of one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub rewards: RewardGroups,
    pub outcome: Outcome,
    pub arrival: bool,
    /// Prior that the rewards were computed from.
    pub prior: PolarPrior,
}

/// Summary of a finished episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub progress: f64,
    pub steps: usize,
    pub level: usize,
}

/// Everything needed to rebuild an environment except the terrain, which is
/// regenerated from its spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvSnapshot {
    spec: TerrainSpec,
    track: FootholdTrack,
    state: RobotState,
    pipeline: DepthPipeline,
    prev_action: Vec<f64>,
    prev_prev_action: Vec<f64>,
    prev_foot_vel: Vec<f64>,
    history: VecDeque<Vec<f64>>,
    obs: Vec<f64>,
    steps: usize,
    max_x: f64,
    rng: ChaCha8Rng,
    level: usize,
    falls: usize,
}

pub struct Env {
    cfg: Arc<EnvConfig>,
    terrain: Terrain,
    edf: EdgeDistanceField,
    track: FootholdTrack,
    state: RobotState,
    pipeline: DepthPipeline,
    prev_action: [f64; ACTION_DIM],
    prev_prev_action: [f64; ACTION_DIM],
    prev_foot_vel: [f64; ACTION_DIM],
    history: VecDeque<[f64; OBS_DIM]>,
    obs: [f64; OBS_DIM],
    steps: usize,
    max_x: f64,
    rng: ChaCha8Rng,
    /// Curriculum level and consecutive falls at that level.
    pub level: usize,
    pub falls: usize,
}

fn foot_vel_flat(state: &RobotState) -> [f64; ACTION_DIM] {
    let mut v = [0.0; ACTION_DIM];
    for f in 0..NUM_FEET {
        v[3 * f..3 * f + 3].copy_from_slice(state.foot_vel[f].as_slice());
    }
    v
}

impl Env {
    /// Creates an environment on a generated lane. The first lane uses `seed` for the
    /// terrain; later lanes draw their seeds from the environment's own stream.
    pub fn new(cfg: Arc<EnvConfig>, family: TerrainFamily, level: usize, seed: u64) -> Result<Self> {
        let spec = TerrainSpec::new(family, level.min(cfg.terrain.levels - 1), seed);
        let terrain = generate(&cfg.terrain, &spec)?;
        Self::with_terrain(cfg, terrain, seed)
    }

    /// Creates an environment on a fixed lane; `seed` drives noise and delays.
    pub fn with_terrain(cfg: Arc<EnvConfig>, terrain: Terrain, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let edf = edge_distance(&terrain.hf, cfg.foothold.h_edge);
        let track = build_track(&terrain, &edf, &cfg.foothold)?;
        let level = terrain.spec.level;
        let mut env = Self {
            pipeline: DepthPipeline::new(&cfg.camera, 0),
            state: RobotState::at_rest(Vector3::zeros(), Default::default()),
            terrain,
            edf,
            track,
            prev_action: [0.0; ACTION_DIM],
            prev_prev_action: [0.0; ACTION_DIM],
            prev_foot_vel: [0.0; ACTION_DIM],
            history: VecDeque::new(),
            obs: [0.0; OBS_DIM],
            steps: 0,
            max_x: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e11f_0000_0001),
            level,
            falls: 0,
            cfg,
        };
        env.restart()?;
        Ok(env)
    }

    /// Restarts the episode on the current lane.
    pub fn restart(&mut self) -> Result<()> {
        let cfg = self.cfg.clone();
        self.state = sim::reset(&cfg.sim, &cfg.episode, &self.terrain, &mut self.rng)?;
        self.track.seek(self.state.pos.x);
        let delay = if cfg.camera.max_delay > 0 {
            self.rng.gen_range(0..=cfg.camera.max_delay)
        } else {
            0
        };
        self.pipeline = DepthPipeline::new(&cfg.camera, delay);
        self.prev_action = [0.0; ACTION_DIM];
        self.prev_prev_action = [0.0; ACTION_DIM];
        self.prev_foot_vel = [0.0; ACTION_DIM];
        self.steps = 0;
        self.max_x = self.state.pos.x;
        self.obs = assemble_observation(&self.state, cfg.episode.command, &self.prev_action, &cfg.noise, &mut self.rng);
        self.history = std::iter::repeat(self.obs).take(cfg.history).collect();
        self.render_due();
        Ok(())
    }

    /// Generates a new lane at the current level and restarts.
    pub fn reset(&mut self) -> Result<()> {
        let spec = TerrainSpec {
            level: self.level.min(self.cfg.terrain.levels - 1),
            seed: self.rng.gen(),
            ..self.terrain.spec.clone()
        };
        self.load_lane(spec)?;
        self.restart()
    }

    fn load_lane(&mut self, spec: TerrainSpec) -> Result<()> {
        self.terrain = generate(&self.cfg.terrain, &spec)?;
        self.edf = edge_distance(&self.terrain.hf, self.cfg.foothold.h_edge);
        self.track = build_track(&self.terrain, &self.edf, &self.cfg.foothold)?;
        Ok(())
    }

    fn render_due(&mut self) {
        if !self.cfg.render {
            return;
        }
        let (hf, state, cam) = (&self.terrain.hf, &self.state, &self.cfg.camera);
        self.pipeline.update(self.steps, cam.history, || {
            render_depth(hf, &CameraPose::on_robot(state, cam), cam, self.steps)
        });
    }

    /// Applies one policy action (clamped to `[-1, 1]`) for one control step.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if action.len() != ACTION_DIM {
            return Err(Error::Simulation(format!("action has {} entries, expected {ACTION_DIM}", action.len())));
        }
        let cfg = self.cfg.clone();
        let mut a = [0.0; ACTION_DIM];
        for (d, s) in a.iter_mut().zip(action) {
            *d = s.clamp(-1.0, 1.0);
        }
        let reference = cfg.gait.reference(self.gait_time());
        let residual = if cfg.gait.enabled { cfg.gait.residual } else { 1.0 };
        let target: [f64; ACTION_DIM] = std::array::from_fn(|k| (reference[k] + residual * a[k]).clamp(-1.0, 1.0));
        let report = sim::step(&cfg.sim, &mut self.state, &target, &self.terrain);
        self.steps += 1;
        let report = match report {
            Ok(r) => r,
            Err(Error::Simulation(_)) => {
                return Ok(Transition {
                    rewards: RewardGroups::default(),
                    outcome: Outcome::Fell,
                    arrival: false,
                    prior: self.prior(),
                })
            }
            Err(e) => return Err(e),
        };
        let pose = self.state.forefoot_pose(&cfg.sim);
        let prior = self.track.prior(&pose, cfg.foothold.distance_3d);
        let arrival = self.track.advance(&pose, &cfg.foothold);

        let foot_vel = foot_vel_flat(&self.state);
        let dt = cfg.sim.control_dt();
        let inputs = RewardInputs {
            command: cfg.episode.command,
            lin_vel: self.state.body_velocity().into(),
            ang_vel: self.state.omega.into(),
            gravity: self.state.gravity_in_body().into(),
            d_left: prior.d_left,
            d_right: prior.d_right,
            psi: prior.psi,
            eps: cfg.foothold.eps,
            joint_acc: foot_vel.iter().zip(&self.prev_foot_vel).map(|(v, p)| (v - p) / dt).collect(),
            power: report.power,
            n_col: report.n_col,
            action: a.to_vec(),
            prev_action: self.prev_action.to_vec(),
            prev_prev_action: self.prev_prev_action.to_vec(),
        };
        let rewards = compute_rewards(&inputs, &cfg.rewards);
        let outcome = sim::check_termination(&self.state, &report, &cfg.episode, &self.terrain, self.steps);

        self.prev_prev_action = self.prev_action;
        self.prev_action = a;
        self.prev_foot_vel = foot_vel;
        self.max_x = self.max_x.max(self.state.pos.x);
        self.obs = assemble_observation(&self.state, cfg.episode.command, &self.prev_action, &cfg.noise, &mut self.rng);
        self.history.pop_front();
        self.history.push_back(self.obs);
        self.render_due();
        Ok(Transition {
            rewards,
            outcome,
            arrival,
            prior,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn terrain(&self) -> &Terrain {
        &self.terrain
    }

    pub fn edge_field(&self) -> &EdgeDistanceField {
        &self.edf
    }

    pub fn track(&self) -> &FootholdTrack {
        &self.track
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Time since the episode started, which drives the reference gait.
    pub fn gait_time(&self) -> f64 {
        self.steps as f64 * self.cfg.sim.control_dt()
    }

    /// Policy action whose simulator target is `desired` (before clamping).
    pub fn action_for_target(&self, desired: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let g = &self.cfg.gait;
        if !g.enabled {
            return *desired;
        }
        let reference = g.reference(self.gait_time());
        std::array::from_fn(|k| (desired[k] - reference[k]) / g.residual)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn observation(&self) -> &[f64; OBS_DIM] {
        &self.obs
    }

    /// Proprioceptive history, oldest first, `history * OBS_DIM` values.
    pub fn proprio_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().flat_map(|o| o.iter().copied())
    }

    /// Normalized depth stack, oldest first. Empty when rendering is off.
    pub fn depth_stack(&self) -> Vec<f32> {
        self.pipeline.stack()
    }

    pub fn depth_pipeline(&self) -> &DepthPipeline {
        &self.pipeline
    }

    pub fn privileged(&self) -> [f64; PRIV_DIM] {
        privileged_state(&self.obs, &self.state, &self.cfg.sim, &self.track)
    }

    pub fn height_grid(&self) -> Vec<f64> {
        height_grid(&self.terrain.hf, &self.state, &self.cfg.grid)
    }

    pub fn prior(&self) -> PolarPrior {
        self.track.prior(&self.state.forefoot_pose(&self.cfg.sim), self.cfg.foothold.distance_3d)
    }

    /// Foothold target in the configured representation.
    pub fn prior_target(&self) -> Vec<f64> {
        match self.cfg.prior {
            PriorKind::Polar => self.prior().to_array().to_vec(),
            PriorKind::YawOnly => {
                let p = self.prior();
                vec![p.psi, p.psi_next]
            }
            PriorKind::Cartesian => cartesian_targets(&self.state, &self.track).to_vec(),
        }
    }

    /// Furthest progress along the lane as a fraction of the start-to-finish distance.
    pub fn progress(&self) -> f64 {
        let t = &self.terrain;
        ((self.max_x - t.start_x) / t.lane_progress_length()).clamp(0.0, 1.0)
    }

    pub fn episode_result(&self, outcome: Outcome) -> EpisodeResult {
        EpisodeResult {
            outcome,
            progress: if outcome == Outcome::Finished { 1.0 } else { self.progress() },
            steps: self.steps,
            level: self.terrain.spec.level,
        }
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            spec: self.terrain.spec.clone(),
            track: self.track.clone(),
            state: self.state.clone(),
            pipeline: self.pipeline.clone(),
            prev_action: self.prev_action.to_vec(),
            prev_prev_action: self.prev_prev_action.to_vec(),
            prev_foot_vel: self.prev_foot_vel.to_vec(),
            history: self.history.iter().map(|o| o.to_vec()).collect(),
            obs: self.obs.to_vec(),
            steps: self.steps,
            max_x: self.max_x,
            rng: self.rng.clone(),
            level: self.level,
            falls: self.falls,
        }
    }

    /// Rebuilds an environment from a snapshot of a generated lane.
    pub fn restore(cfg: Arc<EnvConfig>, snap: EnvSnapshot) -> Result<Self> {
        let arr = |v: &[f64], what: &str| -> Result<[f64; ACTION_DIM]> {
            v.try_into().map_err(|_| Error::Config(format!("snapshot {what} has {} entries", v.len())))
        };
        let mut history = VecDeque::new();
        for o in &snap.history {
            history.push_back(<[f64; OBS_DIM]>::try_from(o.as_slice()).map_err(|_| Error::Config("snapshot history width".into()))?);
        }
        let terrain = generate(&cfg.terrain, &snap.spec)?;
        let edf = edge_distance(&terrain.hf, cfg.foothold.h_edge);
        Ok(Self {
            terrain,
            edf,
            track: snap.track,
            state: snap.state,
            pipeline: snap.pipeline,
            prev_action: arr(&snap.prev_action, "action")?,
            prev_prev_action: arr(&snap.prev_prev_action, "action")?,
            prev_foot_vel: arr(&snap.prev_foot_vel, "foot velocity")?,
            history,
            obs: <[f64; OBS_DIM]>::try_from(snap.obs.as_slice()).map_err(|_| Error::Config("snapshot observation width".into()))?,
            steps: snap.steps,
            max_x: snap.max_x,
            rng: snap.rng,
            level: snap.level,
            falls: snap.falls,
            cfg,
        })
    }
}
