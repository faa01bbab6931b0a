//! Run configuration: a flat JSON object with dotted keys (`train.lr`,
//! `model.m`). Command-line `--set key=value` flags override file values,
//! and every command persists the fully resolved configuration next to its
//! outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn empty() -> Self {
        RunConfig::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)?;
        let obj = parsed
            .as_object()
            .ok_or_else(|| Error::Config(format!("{}: not a JSON object", path.display())))?;
        let mut values = BTreeMap::new();
        for (k, v) in obj {
            if v.is_object() || v.is_array() {
                return Err(Error::Config(format!(
                    "{}: key {k:?} is nested; use flat dotted keys",
                    path.display()
                )));
            }
            values.insert(k.clone(), v.clone());
        }
        Ok(RunConfig { values })
    }

    /// Applies a `key=value` override. Values parse as JSON scalars, with a
    /// bare-string fallback.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    fn take_u64(&self, key: &str, seen: &mut Vec<String>) -> Result<Option<u64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => {
                seen.push(key.to_string());
                v.as_u64()
                    .map(Some)
                    .ok_or_else(|| Error::Config(format!("{key}: expected unsigned integer, got {v}")))
            }
        }
    }

    fn take_f64(&self, key: &str, seen: &mut Vec<String>) -> Result<Option<f64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => {
                seen.push(key.to_string());
                v.as_f64()
                    .map(Some)
                    .ok_or_else(|| Error::Config(format!("{key}: expected number, got {v}")))
            }
        }
    }

    fn take_bool(&self, key: &str, seen: &mut Vec<String>) -> Result<Option<bool>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => {
                seen.push(key.to_string());
                v.as_bool()
                    .map(Some)
                    .ok_or_else(|| Error::Config(format!("{key}: expected boolean, got {v}")))
            }
        }
    }

    /// Folds recognized keys into the training and model configurations.
    /// Unknown keys are an error so typos cannot silently change a run.
    pub fn apply(&self, train: &mut TrainConfig, model: &mut ModelConfig) -> Result<()> {
        let mut seen = Vec::new();
        if let Some(v) = self.take_u64("train.batch_size", &mut seen)? {
            train.batch_size = v as usize;
        }
        if let Some(v) = self.take_u64("train.buffer_size", &mut seen)? {
            train.buffer_size = v as usize;
        }
        if let Some(v) = self.take_f64("train.lr", &mut seen)? {
            train.learning_rate = v as _;
        }
        if let Some(v) = self.take_f64("train.weight_decay", &mut seen)? {
            train.weight_decay = v as _;
        }
        if let Some(v) = self.take_f64("train.warmup_fraction", &mut seen)? {
            train.warmup_fraction = v;
        }
        if let Some(v) = self.take_u64("train.epochs", &mut seen)? {
            train.epochs = v as usize;
        }
        if let Some(v) = self.take_u64("train.early_stop_patience", &mut seen)? {
            train.early_stop_patience = v as usize;
        }
        if let Some(v) = self.take_u64("train.max_steps", &mut seen)? {
            train.max_steps = Some(v as usize);
        }
        if let Some(v) = self.take_bool("train.train_on_all", &mut seen)? {
            train.train_on_all = v;
        }
        if let Some(v) = self.take_u64("train.seed", &mut seen)? {
            train.seed = v;
        }
        if let Some(v) = self.take_u64("model.m", &mut seen)? {
            model.qft.m = v as usize;
        }
        if let Some(v) = self.take_u64("model.qft_layers", &mut seen)? {
            model.qft.n_layers = v as usize;
        }
        if let Some(v) = self.take_u64("model.visual_layers", &mut seen)? {
            model.visual.n_layers = v as usize;
        }
        if let Some(v) = self.take_u64("model.text_layers", &mut seen)? {
            model.text.n_layers = v as usize;
        }
        if let Some(v) = self.take_u64("model.gen_layers", &mut seen)? {
            model.gen_layers = v as usize;
        }
        if let Some(v) = self.take_u64("model.d_model", &mut seen)? {
            model.visual.d_model = v as usize;
            model.text.d_model = v as usize;
            model.qft.d_model = v as usize;
        }
        if let Some(v) = self.take_u64("model.heads", &mut seen)? {
            model.visual.n_heads = v as usize;
            model.text.n_heads = v as usize;
            model.qft.n_heads = v as usize;
        }
        if let Some(v) = self.take_u64("model.max_gen_len", &mut seen)? {
            model.max_gen_len = v as usize;
        }
        let unknown: Vec<&String> =
            self.values.keys().filter(|k| !seen.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Full dotted-key dump of a resolved run, including the loss weights
    /// implied by the preset, for the audit trail written next to outputs.
    pub fn resolved(train: &TrainConfig, model: &ModelConfig) -> Self {
        let weights = train.weights_override.unwrap_or_else(|| train.preset.weights());
        let mut values = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            values.insert(k.to_string(), v);
        };
        put("train.batch_size", Value::from(train.batch_size as u64));
        put("train.buffer_size", Value::from(train.buffer_size as u64));
        put("train.lr", Value::from(train.learning_rate as f64));
        put("train.weight_decay", Value::from(train.weight_decay as f64));
        put("train.warmup_fraction", Value::from(train.warmup_fraction));
        put("train.epochs", Value::from(train.epochs as u64));
        put("train.early_stop_patience", Value::from(train.early_stop_patience as u64));
        put("train.seed", Value::from(train.seed));
        put("train.train_on_all", Value::from(train.train_on_all));
        if let Some(ms) = train.max_steps {
            put("train.max_steps", Value::from(ms as u64));
        }
        put(
            "train.preset",
            Value::from(match train.preset {
                crate::trainer::Preset::ReportGen => "report_gen",
                crate::trainer::Preset::Visual => "visual",
            }),
        );
        put("loss.lambda", Value::from(weights.lambda as f64));
        put("loss.lambda_c", Value::from(weights.lambda_c as f64));
        put("loss.lambda_m", Value::from(weights.lambda_m as f64));
        put("loss.lambda_f", Value::from(weights.lambda_f as f64));
        put("model.m", Value::from(model.qft.m as u64));
        put("model.d_model", Value::from(model.visual.d_model as u64));
        put("model.heads", Value::from(model.visual.n_heads as u64));
        put("model.visual_layers", Value::from(model.visual.n_layers as u64));
        put("model.text_layers", Value::from(model.text.n_layers as u64));
        put("model.qft_layers", Value::from(model.qft.n_layers as u64));
        put("model.gen_layers", Value::from(model.gen_layers as u64));
        put("model.max_gen_len", Value::from(model.max_gen_len as u64));
        RunConfig { values }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.values)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
