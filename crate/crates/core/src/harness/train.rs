//! Training runs on disk: config copy, metrics CSV and periodic checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::harness::config::RunConfig;
use crate::rl::trainer::{MetricsRow, Trainer, METRICS_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_STEM: &str = "final";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_stem(out: &Path, iteration: usize) -> PathBuf {
    out.join(format!("ckpt_{iteration:06}"))
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if i == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(Error::Parse(format!("{}: unexpected metrics header", path.display())));
            }
            continue;
        }
        if !line.trim().is_empty() {
            rows.push(MetricsRow::from_csv(&line)?);
        }
    }
    Ok(rows)
}

/// Trains `cfg.train.iterations` iterations into `out`, optionally continuing from a
/// checkpoint. `on_row` sees every metrics row as it is written.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let metrics_path = out.join(METRICS_FILE);
    let (mut trainer, mut rows) = match resume {
        Some(ckpt) => {
            let t = Trainer::resume(cfg.setup(), ckpt)?;
            let previous = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
            let kept: Vec<MetricsRow> = previous.into_iter().filter(|r| r.iter < t.iteration()).collect();
            (t, kept)
        }
        None => (Trainer::new(cfg.setup())?, Vec::new()),
    };
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(io_err(format!("opening {}", metrics_path.display())))?;
    let write_err = io_err(format!("writing {}", metrics_path.display()));
    let mut text = format!("{METRICS_HEADER}\n");
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(write_err)?;

    let every = cfg.train.checkpoint_every;
    while trainer.iteration() < cfg.train.iterations {
        let row = trainer.iterate()?;
        writeln!(file, "{}", row.to_csv()).map_err(io_err(format!("writing {}", metrics_path.display())))?;
        file.flush().map_err(io_err(format!("writing {}", metrics_path.display())))?;
        on_row(&row);
        rows.push(row);
        if every > 0 && trainer.iteration() % every == 0 {
            trainer.save(&checkpoint_stem(out, trainer.iteration()))?;
        }
    }
    let final_checkpoint = trainer.save(&out.join(FINAL_STEM))?;
    Ok(TrainSummary { rows, final_checkpoint })
}
