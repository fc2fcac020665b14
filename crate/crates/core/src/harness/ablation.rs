//! Paired training and evaluation of the full method against one ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Result};
use crate::harness::config::RunConfig;
use crate::harness::eval::{evaluate_preset, parse_preset, PolicyAgent, PresetReport};
use crate::harness::train::train;
use crate::rl::Variant;

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub variant: Variant,
    pub seed: u64,
    /// Mean foothold-group reward over the last tenth of training.
    pub train_foothold: f64,
    pub train_task: f64,
    pub reports: Vec<PresetReport>,
}

pub const ABLATION_HEADER: &str = "variant,seed,train_foothold,train_task,preset,sr,tr,mse_raw,mse_normalized,mean_episode_length,eval_foothold,eval_task";

/// Mean of the last `max(1, n / 10)` values.
pub fn tail_mean(values: &[f64]) -> f64 {
    let k = (values.len() / 10).max(1).min(values.len().max(1));
    if values.is_empty() {
        return f64::NAN;
    }
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

/// Trains and evaluates `variant` for every seed under `out/<variant>/seed_<s>`.
pub fn run_variant(cfg: &RunConfig, variant: Variant, seeds: &[u64], out: &Path, verbose: bool) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        c.train.variant = variant;
        let dir = out.join(variant.name()).join(format!("seed_{seed}"));
        let summary = train(&c, &dir, None, |row| {
            if verbose && (row.iter + 1) % 50 == 0 {
                eprintln!("{variant} seed {seed} iter {} foothold {:.4} task {:.4}", row.iter + 1, row.mean_reward[1], row.mean_reward[0]);
            }
        })?;
        let foothold: Vec<f64> = summary.rows.iter().map(|r| r.mean_reward[1]).collect();
        let task: Vec<f64> = summary.rows.iter().map(|r| r.mean_reward[0]).collect();
        let mut nets = crate::rl::agent::Networks::new(&c.nets, &c.env_config(), variant, c.seed)?;
        nets.load_checkpoint(&puma_nn::Checkpoint::load(&summary.final_checkpoint)?)?;
        let mut reports = Vec::new();
        for name in &c.eval.presets {
            let preset = parse_preset(name, c.terrain.levels)?;
            let mut agent = PolicyAgent { nets: &nets };
            reports.push(evaluate_preset(&c.env_config(), &mut agent, &preset, c.eval.trials, c.eval.parallel, seed, None)?);
        }
        results.push(AblationResult {
            variant,
            seed,
            train_foothold: tail_mean(&foothold),
            train_task: tail_mean(&task),
            reports,
        });
    }
    Ok(results)
}

/// Runs the full method and `variant` on the same seeds and writes `ablation.csv`.
pub fn ablation_run(cfg: &RunConfig, variant: Variant, seeds: &[u64], out: &Path, verbose: bool) -> Result<Vec<AblationResult>> {
    let mut all = run_variant(cfg, Variant::Full, seeds, out, verbose)?;
    if variant != Variant::Full {
        all.extend(run_variant(cfg, variant, seeds, out, verbose)?);
    }
    let path = out.join("ablation.csv");
    fs::write(&path, ablation_csv(&all)).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(all)
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in results {
        for p in &r.reports {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                r.train_foothold,
                r.train_task,
                p.preset.name,
                p.sr,
                p.tr,
                p.mse_raw,
                p.mse_normalized,
                p.mean_episode_length,
                p.mean_reward_foothold,
                p.mean_reward_task
            );
        }
    }
    s
}
