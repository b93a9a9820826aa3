//! Run configuration files and the manifest written at the start of every
//! training run.

use std::path::{Path, PathBuf};

use dlanet::dataset::{Split, SplitMode};
use dlanet::network::DlaNetConfig;
use dlanet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

/// Network and training settings; the shape of `--config` files and of the
/// `model.json` stored next to each checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: DlaNetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.net.validate().and_then(|_| self.train.validate()).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Everything needed to repeat a training run: the resolved configuration
/// with all defaults filled in, data location, split and per-fold seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub start_time_unix: u64,
    pub seed: u64,
    pub config: RunConfig,
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub parallel_folds: bool,
    pub folds: Vec<FoldPlan>,
}

impl RunManifest {
    pub fn new(config: RunConfig, data: PathBuf, split: &SplitMode, splits: Vec<Split>, out: PathBuf, parallel: bool) -> Self {
        let seed = config.train.seed;
        let folds = splits
            .into_iter()
            .enumerate()
            .map(|(i, s)| FoldPlan { train: s.train, test: s.test, seed: fold_seed(seed, i, parallel) })
            .collect();
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            start_time_unix: now_unix(),
            seed,
            config,
            data,
            split: split.to_string(),
            out,
            parallel_folds: parallel,
            folds,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).context(|| "serialising manifest".into())?;
        std::fs::write(path, text + "\n").context(|| format!("writing {}", path.display()))
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Sequential folds share the run seed; parallel folds each get their own.
pub fn fold_seed(seed: u64, fold: usize, parallel: bool) -> u64 {
    if parallel {
        dlanet::rng::Prng::derive(seed, fold as u64).next_u64()
    } else {
        seed
    }
}
