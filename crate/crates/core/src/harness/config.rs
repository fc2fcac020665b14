//! Run configuration: one TOML file with a section per module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, GaitConfig};
use crate::error::{io_err, Error, Result};
use crate::foothold::FootholdConfig;
use crate::rl::agent::NetsConfig;
use crate::rl::ppo::PpoConfig;
use crate::rl::rewards::RewardWeights;
use crate::rl::trainer::fnv1a;
use crate::rl::{CurriculumConfig, TrainConfig, TrainerSetup};
use crate::sensors::{CameraConfig, NoiseConfig};
use crate::sim::{EpisodeConfig, SimConfig};
use crate::terrain::{GridSpec, TerrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationConfig {
    /// Proprioceptive frames fed to the estimator.
    pub history: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { history: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    /// Episodes simulated side by side.
    pub parallel: usize,
    pub presets: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            parallel: 16,
            presets: vec!["flat".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub terrain: TerrainConfig,
    pub foothold: FootholdConfig,
    pub sim: SimConfig,
    pub episode: EpisodeConfig,
    pub gait: GaitConfig,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
    pub observation: ObservationConfig,
    pub grid: GridSpec,
    pub rewards: RewardWeights,
    pub nets: NetsConfig,
    pub ppo: PpoConfig,
    pub curriculum: CurriculumConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            terrain: TerrainConfig::default(),
            foothold: FootholdConfig::default(),
            sim: SimConfig::default(),
            episode: EpisodeConfig::default(),
            gait: GaitConfig::default(),
            camera: CameraConfig::default(),
            noise: NoiseConfig::default(),
            observation: ObservationConfig::default(),
            grid: GridSpec::default(),
            rewards: RewardWeights::default(),
            nets: NetsConfig::default(),
            ppo: PpoConfig::default(),
            curriculum: CurriculumConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            terrain: self.terrain.clone(),
            foothold: self.foothold.clone(),
            sim: self.sim.clone(),
            episode: self.episode.clone(),
            camera: self.camera.clone(),
            noise: self.noise.clone(),
            rewards: self.rewards.clone(),
            grid: self.grid.clone(),
            history: self.observation.history,
            prior: self.train.variant.prior_kind(),
            render: true,
            gait: self.gait.clone(),
        }
    }

    pub fn setup(&self) -> TrainerSetup {
        TrainerSetup {
            seed: self.seed,
            env: self.env_config(),
            nets: self.nets.clone(),
            ppo: self.ppo.clone(),
            curriculum: self.curriculum.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        if self.eval.trials == 0 || self.eval.parallel == 0 {
            return Err(Error::Config("eval needs at least one trial and one parallel slot".into()));
        }
        Ok(())
    }

    /// Digest of the canonical TOML form.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_toml().unwrap_or_default().as_bytes())
    }
}
