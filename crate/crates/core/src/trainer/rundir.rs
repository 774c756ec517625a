use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{run_with, MetricsRecord, TrainConfig, TrainOutcome};
use crate::error::{LabError, Result};
use crate::policy::Checkpoint;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_FILE: &str = "final.json";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.json")
}

#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Trains and writes `config.json`, `metrics.jsonl`, `ckpt_<step>.json` at
/// every evaluation and `final.json` into `dir`.
pub fn run_to_dir(config: &TrainConfig, dir: &Path) -> Result<(TrainOutcome, RunFiles)> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_json_pretty()?).map_err(|e| LabError::io(&config_path, e))?;

    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| LabError::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut checkpoints = Vec::new();
    let outcome = {
        let mut observer = |rec: &MetricsRecord, ckpt: &Checkpoint| -> Result<()> {
            writer.write_all(rec.to_json_line()?.as_bytes()).map_err(|e| LabError::io(&metrics_path, e))?;
            let path = dir.join(checkpoint_name(rec.step));
            ckpt.save(&path)?;
            checkpoints.push(path);
            Ok(())
        };
        run_with(config, &mut observer)?
    };
    writer.flush().map_err(|e| LabError::io(&metrics_path, e))?;

    let final_path = dir.join(FINAL_FILE);
    outcome.final_checkpoint.save(&final_path)?;
    let files = RunFiles {
        dir: dir.to_path_buf(),
        config: config_path,
        metrics: metrics_path,
        checkpoints,
        final_checkpoint: final_path,
    };
    Ok((outcome, files))
}
