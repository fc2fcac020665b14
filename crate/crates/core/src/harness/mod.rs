//! Configuration files, training runs on disk, evaluation and ablations.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod train;

pub use config::RunConfig;
pub use eval::{evaluate_preset, parse_preset, EvalReport, PresetReport};
