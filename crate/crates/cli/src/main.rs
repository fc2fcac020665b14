use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use puma_core::env::Env;
use puma_core::foothold::build_track;
use puma_core::harness::ablation::{ablation_csv, ablation_run};
use puma_core::harness::eval::{evaluate, load_policy, Agent, PolicyAgent, ScriptedTrot, Trajectory};
use puma_core::harness::train::{train, CONFIG_FILE};
use puma_core::harness::RunConfig;
use puma_core::rl::Variant;
use puma_core::sensors::{render_depth, CameraPose};
use puma_core::sim::{write_traj_binary, write_traj_csv};
use puma_core::terrain::{edge_distance, generate, TerrainFamily, TerrainSpec};

#[derive(Parser)]
#[command(name = "puma-lab", version, about = "Terrain generation, training and evaluation for foothold-guided locomotion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a heightfield (and optionally its foothold track) as text.
    GenTerrain {
        #[arg(long)]
        family: TerrainFamily,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the foothold track, one `x y z on_wall` line per point.
        #[arg(long)]
        emit_track: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render the depth image seen from the start pose of a lane.
    RenderDepth {
        #[arg(long)]
        family: TerrainFamily,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a policy, writing metrics.csv and checkpoints into the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a `.puma` checkpoint written by an earlier run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on terrain presets and print a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Preset names such as `flat`, `stepping-stones:2` or `wall-gap-80`; repeatable.
        #[arg(long)]
        preset: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-step trajectory of the first trial; `.csv` selects CSV, anything else binary.
        #[arg(long)]
        dump_traj: Option<PathBuf>,
        /// Evaluate the open-loop reference trot instead of a checkpoint.
        #[arg(long)]
        scripted: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the full method and one ablation on the same seeds.
    Ablate {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("PUMA_LAB_THREADS") {
        cfg.train.threads = v.parse().with_context(|| format!("PUMA_LAB_THREADS=`{v}` is not a count"))?;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTerrain {
            family,
            level,
            seed,
            out,
            emit_track,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let terrain = generate(&cfg.terrain, &TerrainSpec::new(family, level, seed))?;
            terrain.hf.write_text(create(&out)?)?;
            if let Some(path) = emit_track {
                let edf = edge_distance(&terrain.hf, cfg.foothold.h_edge);
                build_track(&terrain, &edf, &cfg.foothold)?.write_text(create(&path)?)?;
            }
        }
        Command::RenderDepth {
            family,
            level,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let env_cfg = Arc::new(cfg.env_config());
            let env = Env::new(env_cfg.clone(), family, level, seed)?;
            let pose = CameraPose::on_robot(env.state(), &env_cfg.camera);
            render_depth(&env.terrain().hf, &pose, &env_cfg.camera, 0).write_text(create(&out)?)?;
        }
        Command::Train {
            config,
            seed,
            out,
            iterations,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let summary = train(&cfg, &out, resume.as_deref(), |row| {
                if (row.iter + 1) % 10 == 0 {
                    eprintln!(
                        "iter {:>5}  task {:.3}  foothold {:.3}  style {:.3}  level {:.2}",
                        row.iter + 1,
                        row.mean_reward[0],
                        row.mean_reward[1],
                        row.mean_reward[2],
                        row.mean_level
                    );
                }
            })?;
            println!("{}", summary.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            preset,
            trials,
            seed,
            config,
            dump_traj,
            scripted,
            out,
        } => {
            let config = config.or_else(|| {
                let p = checkpoint.as_ref()?.parent()?.join(CONFIG_FILE);
                p.exists().then_some(p)
            });
            let cfg = load_config(config.as_deref())?;
            let presets = if preset.is_empty() { cfg.eval.presets.clone() } else { preset };
            let trials = trials.unwrap_or(cfg.eval.trials);
            let seed = seed.unwrap_or(cfg.seed);
            let mut traj = Trajectory::new();
            let traj_ref = dump_traj.as_ref().map(|_| &mut traj);
            let report = if scripted {
                let mut agent = ScriptedTrot::default();
                evaluate(&cfg, &mut agent, &presets, trials, seed, "scripted", traj_ref)?
            } else {
                let path = checkpoint.context("--checkpoint is required unless --scripted is given")?;
                let (nets, id) = load_policy(&cfg, &path)?;
                let mut agent = PolicyAgent { nets: &nets };
                evaluate(&cfg, &mut agent as &mut dyn Agent, &presets, trials, seed, &id, traj_ref)?
            };
            if let Some(path) = dump_traj {
                let w = create(&path)?;
                if path.extension().is_some_and(|e| e == "csv") {
                    write_traj_csv(w, &traj)?;
                } else {
                    write_traj_binary(w, &traj)?;
                }
            }
            print!("{report}");
            if let Some(path) = out {
                write!(create(&path)?, "{report}")?;
            }
        }
        Command::Ablate {
            variant,
            config,
            seeds,
            out,
            iterations,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.join("ablation"));
            let results = ablation_run(&cfg, variant, &seeds, &out, true)?;
            print!("{}", ablation_csv(&results));
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
