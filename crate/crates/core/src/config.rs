//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, LarsConfig, LoraConfig};
use crate::error::{Error, Result};
use crate::harness::{make_task, SweepConfig, TaskSpec, TrainConfig};
use crate::memory::{Optimizer, Toggles};
use crate::transformer::BackboneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub optimizer: Optimizer,
    pub flash: bool,
    pub gc_factor: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adamw,
            flash: false,
            gc_factor: 1.0,
        }
    }
}

impl MemoryConfig {
    pub fn toggles(&self) -> Toggles {
        Toggles {
            flash: self.flash,
            gc_factor: self.gc_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub adapters: Vec<AdapterSpec>,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub sweep: SweepConfig,
    pub memory: MemoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            adapters: vec![
                AdapterSpec::Lars(LarsConfig::default()),
                AdapterSpec::Lora(LoraConfig::default()),
            ],
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            sweep: SweepConfig::default(),
            memory: MemoryConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.adapters.is_empty() {
            return Err(Error::Config("at least one adapter must be configured".into()));
        }
        for spec in &self.adapters {
            spec.validate(&self.backbone)?;
        }
        self.train.validate()?;
        self.memory.toggles().validate()?;
        make_task(self.task.clone(), self.backbone.vocab, self.train.seed)?;
        Ok(())
    }

    /// One seed drives backbone init, adapter init, and task generation.
    pub fn set_seed(&mut self, seed: u64) {
        self.backbone.seed = seed;
        self.train.seed = seed;
    }
}

/// Parses `4096`, `512B`, `1KB`, `2MiB`, `1.5GB`. Units are binary (1KB = 1024).
pub fn parse_bytes(text: &str) -> Result<u64> {
    let t = text.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let scale: u64 = match unit.to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => 1 << 10,
        "M" | "MB" | "MIB" => 1 << 20,
        "G" | "GB" | "GIB" => 1 << 30,
        _ => return Err(Error::Config(format!("unknown byte unit in `{text}`"))),
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse byte size `{text}`")))?;
    if !(value.is_finite() && value >= 0.0) {
        return Err(Error::Config(format!("byte size `{text}` must be non-negative")));
    }
    Ok((value * scale as f64).round() as u64)
}
