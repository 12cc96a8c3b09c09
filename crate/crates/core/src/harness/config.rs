use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 20_000,
            val_size: 2_000,
        }
    }
}

/// Everything a CLI run needs. `seed` drives data generation, model
/// initialisation and both training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub dst: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::toy(),
            teacher: TrainConfig::toy(),
            dst: TrainConfig::toy_distill(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.model.validate()?;
        let space = cfg.model.arch_space()?;
        cfg.teacher.validate(None)?;
        cfg.dst.validate(Some(&space))?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn teacher_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.teacher.clone()
        }
    }

    pub fn dst_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.dst.clone()
        }
    }
}
