//! Run configuration: one JSON document holding every hyperparameter.
//! Missing keys take their defaults, unknown keys are rejected, and
//! `section.key=value` overrides are applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationOptions {
    /// Time-step counts trained by the `step_sweep` table.
    pub step_sweep: Vec<usize>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            step_sweep: vec![5, 10, 15],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyOptions {
    /// Test image to explain; the first test sample when unset.
    pub image_id: Option<String>,
    /// Index into the image's patch list.
    pub patch: usize,
    /// Class whose score is explained; the sample's label when unset.
    pub class_id: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainOptions,
    /// Directory holding `train/` and `test/` in the dataset layout. When
    /// unset the synthetic generator described by `data` is used.
    pub dataset: Option<PathBuf>,
    pub ablation: AblationOptions,
    pub saliency: SaliencyOptions,
}

fn conf(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `V` of `K=V` as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override in place.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| conf(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(conf(format!("bad override key {key:?}")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| conf(format!("override {key:?}: {part} is not inside an object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| conf(format!("override {key:?} does not address an object field")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Builds the configuration from an optional JSON document plus
    /// overrides, then validates it.
    pub fn from_json(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut doc = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| conf(format!("invalid JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(conf("the configuration must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| conf(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_json(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.weights.validate().map_err(|e| conf(e.to_string()))?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(conf(format!("train.lr must be positive, got {}", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(conf("train.batch_size must be positive"));
        }
        if t.patch_size.0 == 0 || t.patch_size.1 == 0 {
            return Err(conf("train.patch_size extents must be positive"));
        }
        if self.dataset.is_none() {
            if self.data.classes != self.model.classes {
                return Err(conf(format!(
                    "data.classes is {} but model.classes is {}",
                    self.data.classes, self.model.classes
                )));
            }
            if self.data.channels != self.model.in_channels {
                return Err(conf(format!(
                    "data.channels is {} but model.in_channels is {}",
                    self.data.channels, self.model.in_channels
                )));
            }
            self.data.validate().map_err(|e| conf(e.to_string()))?;
        }
        if self.ablation.step_sweep.contains(&0) {
            return Err(conf("ablation.step_sweep entries must be positive"));
        }
        Ok(())
    }

    /// Pretty JSON of the effective configuration.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
