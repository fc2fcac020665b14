//! Grouped rewards, multi-critic advantages, PAS and the PPO training loop.

pub mod advantage;
pub mod agent;
pub mod curriculum;
pub mod pas;
pub mod ppo;
pub mod rewards;
pub mod trainer;
pub mod variant;

pub use advantage::{gae, mix_advantages};
pub use curriculum::{curriculum_step, CurriculumConfig};
pub use pas::{pas_select, PasSchedule};
pub use rewards::{compute_rewards, RewardGroups, RewardInputs, RewardWeights};
pub use trainer::{MetricsRow, TrainConfig, Trainer, TrainerSetup, METRICS_HEADER};
pub use variant::Variant;
