//! Flat `key = value` configuration files with CLI-flag overrides
//! (flags win over file values).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::CliError;

/// Parsed configuration: a flat, ordered key/value map.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Input(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            values.insert(
                key.trim().to_string(),
                value.trim().trim_matches('"').to_string(),
            );
        }
        Ok(Self { values })
    }

    /// Flag overrides: `Some` values replace file entries.
    pub fn set_override(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Input(format!("config key `{key}`: invalid number `{v}`"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Input(format!("config key `{key}`: invalid integer `{v}`"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.get_u64(key, default as u64)? as usize)
    }

    /// Comma-separated list of numbers, e.g. `depths = 2,3,4,5`.
    pub fn get_list_f64(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, CliError> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        CliError::Input(format!("config key `{key}`: invalid number `{s}`"))
                    })
                })
                .collect(),
        }
    }

    pub fn get_list_usize(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, CliError> {
        Ok(self
            .get_list_f64(key, &default.iter().map(|&d| d as f64).collect::<Vec<_>>())?
            .into_iter()
            .map(|f| f as usize)
            .collect())
    }

    /// Snapshot for the run manifest.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
