use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use visualrwkv::model::{ModelConfig, Reduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_end: f64,
    pub schedule: String,
    pub weight_decay: f64,
    pub epochs_stage1: f64,
    pub epochs_stage2: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub reduction: Reduction,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Colour cells per image side.
    pub grid: usize,
    /// Number of colours in use (at most 8).
    pub palette: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig {
                lr_init: 3e-3,
                lr_end: 1e-4,
                schedule: "cosine".into(),
                weight_decay: 0.01,
                epochs_stage1: 0.2,
                epochs_stage2: 2.0,
                batch_size: 8,
                grad_accum: 1,
                reduction: Reduction::Batch,
                seed: 0,
            },
            data: DataConfig {
                grid: 2,
                palette: 4,
                n_train: 5000,
                n_eval: 500,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        if self.train.schedule != "cosine" {
            bail!(
                "unsupported schedule {:?}; only \"cosine\" is available",
                self.train.schedule
            );
        }
        if self.train.batch_size == 0 || self.train.grad_accum == 0 {
            bail!("batch_size and grad_accum must be positive");
        }
        if self.data.palette == 0 || self.data.palette > crate::data::PALETTE.len() {
            bail!("palette must be in 1..={}", crate::data::PALETTE.len());
        }
        if self.data.grid == 0 || self.data.grid > crate::data::IMAGE_SIZE {
            bail!("grid must be in 1..={}", crate::data::IMAGE_SIZE);
        }
        if crate::data::IMAGE_SIZE % self.model.patch != 0 {
            bail!(
                "patch {} does not divide the {}px images",
                self.model.patch,
                crate::data::IMAGE_SIZE
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
