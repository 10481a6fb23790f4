//! The run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::read_file;
use crate::error::{Error, Result};
use crate::losses::ExtractorConfig;
use crate::pipeline::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root: `<clip>/hazy/*.png` and `<clip>/gt/*.png`.
    pub train_dir: PathBuf,
    pub val_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: PathBuf::from("data/train"),
            val_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorConfig,
    pub data: DataConfig,
}

/// Dotted paths of keys in `doc` that `reference` does not have.
fn unknown_keys(doc: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(r)) = (doc, reference) else { return };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(path),
            Some(rv) => unknown_keys(v, rv, &path, out),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses a JSON document. Unknown keys are rejected all at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let reference = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&doc, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve(&base, &mut config.data.train_dir);
        if let Some(v) = config.data.val_dir.as_mut() {
            resolve(&base, v);
        }
        resolve(&base, &mut config.train.checkpoint_dir);
        if let Some(w) = config.extractor.weights.as_mut() {
            resolve(&base, w);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate(self.model.downsampling_factor())?;
        if self.train.loss.layer_weights.len() != self.extractor.layers.len() {
            return Err(Error::Config(format!(
                "{} layer weights for {} extractor layers",
                self.train.loss.layer_weights.len(),
                self.extractor.layers.len()
            )));
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
