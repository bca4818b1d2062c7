//! Per-run manifest: everything needed to re-execute a run and find its
//! outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Flat config snapshot (file values merged with flag overrides).
    pub config: BTreeMap<String, String>,
    pub library_version: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
    /// Command-specific scalar diagnostics (e.g. achieved margin).
    pub metrics: BTreeMap<String, f64>,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &Config, seed: u64) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                config: config
                    .entries()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
                library_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                wall_clock_seconds: 0.0,
                outputs: Vec::new(),
                metrics: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn add_output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn add_metric(&mut self, key: &str, value: f64) {
        self.manifest.metrics.insert(key.to_string(), value);
    }

    /// Write `manifest.json` next to the run outputs.
    pub fn write(mut self, dir: &Path) -> Result<(), CliError> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}
