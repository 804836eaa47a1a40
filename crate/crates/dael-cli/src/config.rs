//! Config-file loading and flag precedence: flag > file > default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dael_core::dataset::SynthSpec;
use dael_core::trainer::TrainConfig;
use dael_core::{Error, Result};

/// Experiment-protocol section of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            seeds: vec![1, 2, 3],
            jobs: 0,
        }
    }
}

/// The full configuration document: one section per subsystem, every field
/// defaulted, unknown keys rejected by name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub protocol: ProtocolSection,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Contract(format!("config {path:?}: {e}")))
    }

    /// File config when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(CliConfig::default()),
        }
    }

    /// The effective configuration as a TOML document, echoed into reports.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }
}

/// Applies `Some` flag values over config-file values.
pub fn override_opt<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
