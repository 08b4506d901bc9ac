//! Run configuration: preset defaults, TOML file, then command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use stfm_core::data_model::ScaleConfig;
use stfm_core::model::ModelConfig;
use stfm_core::training::TrainConfig;
use toml::{Table, Value};

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    /// Sampler steps; the checkpoint's setting when absent.
    pub steps: Option<usize>,
    pub max_audio_frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
}

impl RunConfig {
    pub fn for_preset(preset: &str) -> Result<Self> {
        let scale = ScaleConfig::preset(preset).map_err(|e| UsageError(e.to_string()))?;
        Ok(Self {
            preset: preset.to_string(),
            model: ModelConfig { scale, ..Default::default() },
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
        })
    }

    /// Defaults for the file's preset (or `preset` when given), overlaid with
    /// the file, then with `overrides` (dotted `key=value` pairs).
    pub fn resolve(file: Option<&Path>, preset: Option<&str>, overrides: &[(String, Value)]) -> Result<Self> {
        let table = match file {
            Some(p) => read_table(p)?,
            None => Table::new(),
        };
        let name = match (preset, table.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(Value::String(s))) => s.clone(),
            (None, Some(_)) => bail!(UsageError("preset must be a string".into())),
            (None, None) => "desk".to_string(),
        };
        let mut cfg = merge_into(&Self::for_preset(&name)?, table, overrides)?;
        cfg.preset = name;
        cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
        cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

/// Serializes `base`, overlays `file` and `overrides`, and reads it back.
pub fn merge_into<T: Serialize + DeserializeOwned>(base: &T, file: Table, overrides: &[(String, Value)]) -> Result<T> {
    let mut merged = Value::try_from(base)?;
    overlay(&mut merged, Value::Table(file));
    for (key, v) in overrides {
        set_path(&mut merged, key, v.clone())?;
    }
    merged
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {e}")).into())
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let Value::Table(t) = cur else { bail!(UsageError(format!("`{key}` does not name a table entry"))) };
        cur = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let Value::Table(t) = cur else { bail!(UsageError(format!("`{key}` does not name a table entry"))) };
    t.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

/// `key=value`, with the value read as TOML and falling back to a string.
pub fn parse_override(s: &str) -> std::result::Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err("empty key".into());
    }
    let value = toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlr = 0.5\nepochs = 3\n[model]\naudio_layers = 1\n").unwrap();
        let cfg = RunConfig::resolve(Some(&p), None, &[parse_override("train.epochs=7").unwrap()]).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.audio_layers, 1);
        assert_eq!(cfg.model.scale, ScaleConfig::desk());
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(None, Some("desk"), &[parse_override("train.max_steps=5").unwrap()]).unwrap();
        let p = dir.path().join("r.toml");
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), None, &[]).unwrap(), cfg);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let err = RunConfig::resolve(None, None, &[parse_override("train.lr=\"x\"").unwrap()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(RunConfig::resolve(None, Some("huge"), &[]).is_err());
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override("a.b=abc").unwrap().1, Value::String("abc".into()));
    }
}
