//! Run configuration: one JSON document with a section per module, plus
//! dotted-key overrides (`train.lr=0.001`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{ColumnMapping, LengthFilter};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::objectives::{ContextMode, LossWeights};
use crate::synth::SynthConfig;
use crate::trainer::{TrainConfig, TrainSetup};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "SKIPREC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub columns: ColumnMapping,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let filter = LengthFilter::default();
        Self {
            path: None,
            columns: ColumnMapping::default(),
            min_len: filter.min_len,
            max_len: filter.max_len,
        }
    }
}

impl DataConfig {
    pub fn filter(&self) -> LengthFilter {
        LengthFilter {
            min_len: self.min_len,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub context_mode: ContextMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            temperature: w.temperature,
            context_mode: ContextMode::Predicted,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides. Values parse as JSON when possible and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            set_path(&mut root, key, value)?;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.min_len > self.data.max_len {
            return Err(Error::Config("data.min_len exceeds data.max_len".into()));
        }
        Ok(())
    }

    /// Training inputs; validation reuses the evaluation protocol.
    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss.weights(),
            context_mode: self.loss.context_mode,
            validation: EvalConfig {
                seed: self.train.seed,
                ..self.eval.clone()
            },
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            // Optional fields serialize as null but still exist.
            if !map.contains_key(*part) {
                return Err(unknown());
            }
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).ok_or_else(unknown)?;
    }
    Err(unknown())
}
