//! TOML configuration shared by the trainer and the CLI.

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_steps() -> u64 { 2000 }
fn default_batch() -> usize { 2 }
fn default_crop() -> usize { 64 }
fn default_seed() -> u64 { 42 }
fn default_lr_max() -> f64 { 2e-4 }
fn default_lr_period() -> u64 { 2000 }
fn default_image_size() -> usize { 96 }

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_period")]
    pub lr_period: u64,
    /// Source images are generated at this size and randomly cropped.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: default_steps(),
            batch: default_batch(),
            crop: default_crop(),
            seed: default_seed(),
            lr_max: default_lr_max(),
            lr_period: default_lr_period(),
            image_size: default_image_size(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.crop < 32 || self.image_size < self.crop {
            return Err(Error::Config(
                "crop must be >= 32 and <= image_size".into(),
            ));
        }
        if self.lr_max <= 0.0 {
            return Err(Error::Config("lr_max must be positive".into()));
        }
        Ok(())
    }
}

/// Top-level config document: `[network]` and `[train]` sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

pub fn parse_config(text: &str) -> Result<ConfigDoc> {
    let doc: ConfigDoc =
        toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
    doc.network.validate()?;
    doc.train.validate()?;
    Ok(doc)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigDoc> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let doc = parse_config("").unwrap();
        assert_eq!(doc.network, NetworkConfig::default());
        assert_eq!(doc.train, TrainConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let doc = parse_config(
            "[network]\nscales = 1\nbase_channels = 8\n[train]\nsteps = 10\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(doc.network.scales, 1);
        assert_eq!(doc.network.base_channels, 8);
        assert_eq!(doc.train.steps, 10);
        assert_eq!(doc.train.seed, 7);
        assert_eq!(doc.train.batch, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config("[network]\nscale = 1\n").is_err());
        assert!(parse_config("[unknown]\nx = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse_config("[train]\nbatch = 0\n").is_err());
        assert!(parse_config("[train]\ncrop = 16\n").is_err());
        assert!(parse_config("[network]\nscales = 0\n").is_err());
    }
}
