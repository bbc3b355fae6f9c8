//! Run configuration: model + training + task + paths, loaded from a TOML
//! file with every field defaulted, overridable from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticTaskConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory holding `images/` and `labels/`.
    pub dir: String,
    /// Images written by the generate command.
    pub num_images: usize,
    /// Portion of the dataset used for training (rest held out).
    pub train_fraction: f64,
    /// Seed of the train/holdout split.
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".to_string(),
            num_images: 8,
            train_fraction: 1.0,
            split_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OutputConfig {
    pub checkpoint: String,
    pub log: String,
    pub report: String,
    pub prediction: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            checkpoint: "model.ckpt".to_string(),
            log: "train.log".to_string(),
            report: "report.txt".to_string(),
            prediction: "prediction.png".to_string(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Element type of all tensors: "f64" (default) or "f32".
    pub dtype: DtypeChoice,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: SyntheticTaskConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
pub enum DtypeChoice {
    #[serde(rename = "f32")]
    F32,
    #[default]
    #[serde(rename = "f64")]
    F64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(Error::config(format!(
                "train_fraction must lie in [0,1], got {}",
                self.data.train_fraction
            )));
        }
        if self.data.num_images == 0 {
            return Err(Error::config("num_images must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Fully resolved config as TOML, echoed into run logs.
    pub fn echo(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unserializable config: {e}"))
    }
}
