//! Run configuration: a JSON document plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{AblationFlags, LossOptions, ModelConfig};
use crate::objective::ObjectiveWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            learning_rate: 1e-2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Holds `train.jsonl` and `val.jsonl`.
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    /// JSON metric report; a text table is written next to it.
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset_dir: "data".into(),
            checkpoint: "run/checkpoint.json".into(),
            train_log: "run/train_log.jsonl".into(),
            report: "run/report.json".into(),
        }
    }
}

impl PathsConfig {
    pub fn train_file(&self) -> PathBuf {
        self.dataset_dir.join("train.jsonl")
    }

    pub fn val_file(&self) -> PathBuf {
        self.dataset_dir.join("val.jsonl")
    }

    pub fn report_text(&self) -> PathBuf {
        self.report.with_extension("txt")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveWeights,
    pub training: TrainingConfig,
    pub ablation: AblationFlags,
    pub synth: SynthSpec,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies one `section.key=value` override. The value is parsed as JSON
    /// when possible and taken as a string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!("{key} is a section, not a value")));
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        for a in assignments {
            self.set(a.as_ref())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.synth.validate()?;
        if self.synth.image_vocab > self.model.image_vocab {
            return Err(Error::Config(format!(
                "synth.image_vocab {} exceeds model.image_vocab {}",
                self.synth.image_vocab, self.model.image_vocab
            )));
        }
        if self.synth.text_vocab > self.model.text_vocab {
            return Err(Error::Config(format!(
                "synth.text_vocab {} exceeds model.text_vocab {}",
                self.synth.text_vocab, self.model.text_vocab
            )));
        }
        let longest = self.synth.latent_dim.max(1 + self.synth.text_fillers);
        if longest > self.model.max_len {
            return Err(Error::Config(format!(
                "sequences of {longest} tokens exceed model.max_len {}",
                self.model.max_len
            )));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config(
                "training.batch_size must be at least 1".into(),
            ));
        }
        if !(self.training.learning_rate > 0.0 && self.training.learning_rate.is_finite()) {
            return Err(Error::Config("training.learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions::new(self.objective, &self.ablation)
    }
}
