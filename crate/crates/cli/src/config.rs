use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpcn_core::network::{ModelConfig, TrainConfig};

use crate::error::{CliError, CliResult};

/// Environment variable consulted for the seed when neither a flag nor the
/// config sets one.
pub const SEED_ENV: &str = "TPCN_SEED";

/// Everything a training or evaluation run reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Epochs between numbered checkpoint snapshots; `None` keeps every
    /// epoch. The final epoch is always kept.
    pub checkpoint_every: Option<u32>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads and validates a config file. Relative paths inside it are taken
    /// relative to the file's own directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        config.model.validate()?;
        config.train.validate()?;
        if config.checkpoint_every == Some(0) {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data_dir, &mut config.checkpoint_dir, &mut config.log_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

/// Flag, then config, then `TPCN_SEED`, then zero.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
