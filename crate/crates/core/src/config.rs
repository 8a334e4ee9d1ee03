//! Run configuration: built-in defaults, then a TOML file, then `key=value`
//! overrides addressed by dotted paths such as `train.max_iterations=200`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest used by `train` and `eval` when no other source is given.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub const SNAPSHOT_FILE: &'static str = "config.toml";

    /// Layers the optional file and the overrides over the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.synth.validate()
    }

    /// Writes the effective configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Sets `a.b.c=value` in `tree`. The value is parsed as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(tree: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = tree;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
