//! Run configuration: a JSON file with optional `model`, `train` and
//! `decode` sections over a built-in preset.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cptr_core::decoding::DecodeConfig;
use cptr_core::model::ModelConfig;
use cptr_core::training::TrainConfig;

/// Environment variable supplying the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "CPTR_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size model and schedule.
    Full,
    /// Small model and schedule for the synthetic corpus.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => RunConfig {
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                decode: DecodeConfig::default(),
            },
            Preset::Toy => RunConfig {
                model: ModelConfig::toy(ModelConfig::default().vocab_size),
                train: TrainConfig::toy(),
                decode: DecodeConfig::default(),
            },
        }
    }

    /// `preset` overlaid with the JSON text of a config file. Also reports
    /// whether the file set `train.seed`.
    pub fn from_json(preset: Preset, text: &str) -> Result<(Self, bool)> {
        let over: Value = serde_json::from_str(text).context("config file is not valid JSON")?;
        if !over.is_object() {
            bail!("config file must hold a JSON object");
        }
        let has_seed = over.pointer("/train/seed").is_some();
        let mut base = serde_json::to_value(RunConfig::preset(preset))?;
        merge(&mut base, over);
        let cfg: RunConfig = serde_json::from_value(base).context("invalid config")?;
        Ok((cfg, has_seed))
    }

    pub fn load(preset: Preset, path: Option<&Path>) -> Result<(Self, bool)> {
        match path {
            None => Ok((RunConfig::preset(preset), false)),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                RunConfig::from_json(preset, &text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Recursively overwrite `base` with the fields present in `over`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Seed precedence: flag, then config file, then `CPTR_SEED`, then preset.
pub fn resolve_seed(flag: Option<u64>, file_seed: Option<u64>, env: Option<&str>, preset_seed: u64) -> Result<u64> {
    if let Some(s) = flag.or(file_seed) {
        return Ok(s);
    }
    match env {
        Some(text) => text
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={text:?} is not an unsigned integer")),
        None => Ok(preset_seed),
    }
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}
