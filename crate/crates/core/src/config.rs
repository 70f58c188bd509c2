//! The flat TOML run configuration: every `TrainConfig`, `ModelConfig` and
//! `DspConfig` field as a top-level key, plus data-location keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::model::{BackboneInit, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneSource {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: PathBuf,
    pub cache_dir: PathBuf,
    pub runs_dir: PathBuf,
    pub exclude_imputed: bool,
    pub backbone_init: BackboneSource,
    /// Safetensors export of torchvision's ImageNet `efficientnet_b0` weights.
    pub backbone_weights: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data/qdat".into(),
            cache_dir: "cache".into(),
            runs_dir: "runs".into(),
            exclude_imputed: false,
            backbone_init: BackboneSource::Pretrained,
            backbone_weights: "weights/efficientnet_b0.safetensors".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub dsp: DspConfig,
    #[serde(flatten)]
    pub data: DataConfig,
}

fn known_keys() -> Vec<String> {
    match toml::Table::try_from(RunConfig::default()) {
        Ok(t) => t.keys().cloned().collect(),
        Err(_) => Vec::new(),
    }
}

impl RunConfig {
    /// Parses a complete config; unknown and missing keys are both errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let known = known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!("config: unknown key {k:?}")));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.dsp.validate()
    }

    /// Overrides one key; `value` is a TOML literal (`40`, `"random"`,
    /// `[1, 0.19, 0.95]`) or, failing that, a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self)
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        if !table.contains_key(key) {
            return Err(Error::Config(format!("config: unknown key {key:?}")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = Self::from_table(table)?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Relative paths are resolved against `base` (normally the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.root,
            &mut self.data.cache_dir,
            &mut self.data.runs_dir,
            &mut self.data.backbone_weights,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn backbone_init(&self) -> BackboneInit {
        match self.data.backbone_init {
            BackboneSource::Pretrained => BackboneInit::Pretrained(self.data.backbone_weights.clone()),
            BackboneSource::Random => BackboneInit::Random,
        }
    }
}
