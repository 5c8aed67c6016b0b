use std::fs;
use std::path::{Path, PathBuf};

use o2o_core::datasets::{MediumReplayConfig, Recipe};
use o2o_core::harness::ExperimentConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// How to build the dataset when `experiment.dataset` does not exist yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecipe {
    pub recipe: Recipe,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Only read for `medium_replay`.
    #[serde(default)]
    pub medium_replay: MediumReplayConfig,
}

fn default_size() -> usize {
    50_000
}

/// Contents of the file passed to `o2o run --config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_recipe: Option<DatasetRecipe>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}
