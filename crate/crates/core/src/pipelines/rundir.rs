use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::RunOutcome;
use crate::error::Result;
use crate::evaluation::{aggregate, emit_report};

/// Layout of one run directory, `<root>/<experiment>/<fold>/<seed>/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path, experiment: &str, fold: usize, seed: u64) -> Self {
        Self {
            dir: root
                .join(experiment)
                .join(fold.to_string())
                .join(seed.to_string()),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn loss(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.ckpt"))
    }
}

/// Persists the resolved config, segmenter checkpoint, loss trace and metrics of a run.
pub fn write_run<C: Serialize>(
    root: &Path,
    experiment: &str,
    run: &RunOutcome,
    config: &C,
) -> Result<RunPaths> {
    let paths = RunPaths::new(root, experiment, run.fold, run.seed);
    fs::create_dir_all(paths.dir.join("checkpoints"))?;
    fs::write(paths.config(), serde_json::to_string_pretty(config)?)?;
    run.segmenter.segmenter.save(
        &paths.checkpoint("segmenter"),
        run.segmenter.best_iteration as u64,
    )?;
    run.segmenter.log.write_csv(&paths.loss())?;
    emit_report(&aggregate(std::slice::from_ref(&run.record))?, &paths.dir)?;
    Ok(paths)
}
