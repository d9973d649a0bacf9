//! Experiment configuration files. Unknown keys are rejected and reported
//! with their path. Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evalharness::{AblationSpec, TrainConfig, Variant};
use crate::lora::LoraConfig;
use crate::modelzoo::{parse_json, reference, ModelConfig};
use crate::signalprep::Style;

pub const DEFAULT_FOLDS: usize = 10;

fn d_folds() -> usize {
    DEFAULT_FOLDS
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    #[default]
    Full,
    HeadOnly,
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationSpec,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig { folds: DEFAULT_FOLDS, train: TrainConfig::default(), ablation: AblationSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Reference model name or path to a model config file.
    pub model: String,
    /// Backbone weights to start from; random init from the model seed
    /// otherwise.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// EEGD container directory.
    pub data: PathBuf,
    /// Preprocessing applied after loading.
    #[serde(default)]
    pub style: Option<Style>,
    #[serde(default)]
    pub variant: VariantKind,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub harness: HarnessConfig,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.harness.folds >= 2, Config, "harness.folds must be at least 2");
        self.harness.train.validate()?;
        self.harness.ablation.validate()?;
        match (self.variant, &self.lora) {
            (VariantKind::Lora, None) => return Err(Error::Config("variant lora needs a lora block".into())),
            (_, Some(l)) => l.validate()?,
            _ => {}
        }
        Ok(())
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = parse_json(text, origin)?;
        let base = origin.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data);
        fix(&mut cfg.output_dir);
        if let Some(c) = &mut cfg.checkpoint {
            fix(c);
        }
        if !reference::names().any(|n| n == cfg.model) && Path::new(&cfg.model).is_relative() {
            cfg.model = base.join(&cfg.model).to_string_lossy().into_owned();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        reference::resolve(&self.model)
    }

    pub fn variant(&self) -> Variant {
        match self.variant {
            VariantKind::Full => Variant::Full,
            VariantKind::HeadOnly => Variant::HeadOnly,
            VariantKind::Lora => Variant::Lora(self.lora.clone().expect("validated")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn misspelled_nested_key_names_its_path() {
        let text = r#"{"model":"eegnet","data":"d","output_dir":"o","harness":{"train":{"epoch":3}}}"#;
        let err = ExperimentConfig::from_json_str(text, Path::new("/x/exp.json")).unwrap_err().to_string();
        assert!(err.contains("harness.train") && err.contains("epoch"), "{err}");
    }

    #[test]
    fn paths_resolve_against_the_file() {
        let text = r#"{"model":"eegnet","data":"d","output_dir":"/abs/o","variant":"lora","lora":{"targets":["conv"],"rank":2}}"#;
        let c = ExperimentConfig::from_json_str(text, Path::new("/x/exp.json")).unwrap();
        assert_eq!(c.data, Path::new("/x/d"));
        assert_eq!(c.output_dir, Path::new("/abs/o"));
        assert!(matches!(c.variant(), Variant::Lora(_)));
        let bad = r#"{"model":"eegnet","data":"d","output_dir":"o","variant":"lora"}"#;
        assert!(ExperimentConfig::from_json_str(bad, Path::new("e.json")).is_err());
    }
}
