//! JSON configuration files.

use std::path::{Path, PathBuf};

use adaptkan::adapt::AdaptConfig;
use adaptkan::clf::ClfTrainPlan;
use adaptkan::network::InitConfig;
use adaptkan::optim::TrainPlan;
use adaptkan::tasks::TaskConfig;
use adaptkan::{KanError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Datasets read from disk instead of generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default = "one")]
    pub targets: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub model: InitConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub plan: TrainPlan,
    #[serde(default)]
    pub data: Option<DataFiles>,
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.task.seed = s;
            self.model.seed = s;
            self.plan.seed = s;
        }
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfConfig {
    pub model: InitConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub plan: ClfTrainPlan,
}

impl ClfConfig {
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model.seed = s;
            self.plan.seed = s;
        }
        self
    }
}

pub fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    let path = path.ok_or_else(|| KanError::Config("this command needs --config <file>".into()))?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| KanError::Config(format!("{}: {e}", path.display())))
}
