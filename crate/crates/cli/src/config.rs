//! The TOML run configuration. Every section is optional; command-line flags
//! override individual fields after loading.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pcp_core::finetune::TrainConfig;
use pcp_core::pcp::PruneConfig;
use pcp_core::toybench::{Augmentation, GeneratorSpec};
use pcp_core::transfer::MixConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub generate: GeneratorSpec,
    pub train: TrainConfig,
    pub augment: Augmentation,
    pub prune: PruneConfig,
    pub calibration: CalibrationConfig,
    pub pseudo: PseudoConfig,
    pub mix: MixConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Images drawn from the head of the calibration set.
    pub images: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { images: 128 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    /// Minimum top softmax probability; 0 keeps every sample.
    pub threshold: f64,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<CliConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Parses a config, rejecting keys that no field consumes. Flattened
    /// sections cannot use `deny_unknown_fields`, so the check compares the
    /// input against the re-serialized result.
    pub fn parse(text: &str) -> Result<CliConfig> {
        let input: toml::Table = toml::from_str(text)?;
        let cfg: CliConfig = toml::from_str(text)?;
        let resolved = toml::Table::try_from(&cfg)?;
        let mut unknown = Vec::new();
        unknown_keys(&input, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown key(s): {}", unknown.join(", "));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("cannot serialize the resolved config")
    }
}

fn unknown_keys(input: &toml::Table, resolved: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in input {
        let path = format!("{prefix}{k}");
        match (v, resolved.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(a), Some(toml::Value::Table(b))) => unknown_keys(a, b, &format!("{path}."), out),
            _ => {}
        }
    }
}
