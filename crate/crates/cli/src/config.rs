use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use swinunetr::inference::SlidingWindowPlan;
use swinunetr::model::ModelConfig;
use swinunetr::train::TrainConfig;
use swinunetr::volume::SynthConfig;

/// Environment variable that overrides the RNG seed of every command.
pub const SEED_ENV: &str = "SWINUNETR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub plan: SlidingWindowPlan,
    pub threshold: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { plan: SlidingWindowPlan::default(), threshold: 0.5 }
    }
}

/// Settings file shared by all subcommands; each reads its own sections.
/// Missing sections take the defaults of the chosen preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size model and the long schedule.
    Default,
    /// Tiny model and the short schedule for synthetic data.
    Toy,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Toy => ModelConfig::tiny(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Default => TrainConfig::default(),
            Preset::Toy => TrainConfig::toy(),
        }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("--config: cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("--config: {} is not a valid config", path.display()))
}

/// Seed from the environment, if set.
pub fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

/// Flag beats environment beats file.
pub fn pick_seed(file: u64, flag: Option<u64>) -> anyhow::Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(file),
    })
}
