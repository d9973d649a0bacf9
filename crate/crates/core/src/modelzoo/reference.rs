//! Reference configurations shipped with the crate. `labram_base` and
//! `neurogpt_full` are full size; the rest are desk-scale.

use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};

macro_rules! refs {
    ($($name:literal),* $(,)?) => {
        const FILES: &[(&str, &str)] = &[$(($name, include_str!(concat!("../../../../configs/models/", $name, ".json")))),*];
    };
}

refs!(
    "eegnet",
    "eeginception",
    "labram_desk",
    "labram_base",
    "labram_tiny",
    "neurogpt_encoder",
    "neurogpt_full_desk",
    "neurogpt_full",
);

pub fn names() -> impl Iterator<Item = &'static str> {
    FILES.iter().map(|(n, _)| *n)
}

pub fn get(name: &str) -> Result<ModelConfig> {
    let (_, text) = FILES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no reference model {name:?}; known: {}", names().collect::<Vec<_>>().join(", "))))?;
    ModelConfig::from_json_str(text, Path::new(&format!("{name}.json")))
}

/// A reference name, or else a path to a config file.
pub fn resolve(name_or_path: &str) -> Result<ModelConfig> {
    if FILES.iter().any(|(n, _)| *n == name_or_path) {
        get(name_or_path)
    } else {
        ModelConfig::load(Path::new(name_or_path))
    }
}
