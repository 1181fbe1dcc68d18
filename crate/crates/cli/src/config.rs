//! Run configuration: one JSON file with `synth` and `protocol` sections,
//! plus dotted-path overrides from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use aspectpd::error::{Error, Result};
use aspectpd::protocol::ProtocolConfig;
use aspectpd::synth::SynthConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Applies `key.path=value` overrides. Every path must name an
    /// existing field; values parse as JSON first and fall back to
    /// strings.
    pub fn apply_overrides(self, overrides: &[String]) -> Result<RunConfig> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut value = serde_json::to_value(&self).expect("config serializes");
        for entry in overrides {
            let (path, raw) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {entry:?} is not of the form key=value"))
            })?;
            let new_value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let pointer = format!("/{}", path.replace('.', "/"));
            let slot = value.pointer_mut(&pointer).ok_or_else(|| {
                Error::Config(format!("unknown config field {path:?}"))
            })?;
            *slot = new_value;
        }
        serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("override produced invalid config: {e}")))
    }
}

/// Parses a `--seeds` list of the form `1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: std::result::Result<Vec<u64>, _> =
        s.split(',').map(|p| p.trim().parse::<u64>()).collect();
    let seeds = seeds.map_err(|_| Error::Config(format!("bad --seeds list {s:?}")))?;
    if seeds.is_empty() {
        return Err(Error::Config("--seeds list is empty".into()));
    }
    Ok(seeds)
}
