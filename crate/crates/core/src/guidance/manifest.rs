use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    /// The fully resolved command configuration; feeding it back through
    /// `--config` repeats the run.
    pub config: serde_json::Value,
    pub seed: u64,
    pub model_spec: Option<String>,
    pub model: Option<String>,
    pub schedule_kind: Option<String>,
    pub schedule_steps: Option<usize>,
    pub sampling_steps: Option<usize>,
    /// Guidance weight used at each step, first step first.
    pub lambdas: Vec<f64>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed,
            model_spec: None,
            model: None,
            schedule_kind: None,
            schedule_steps: None,
            sampling_steps: None,
            lambdas: Vec::new(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.manifest_version)));
        }
        Ok(m)
    }
}
