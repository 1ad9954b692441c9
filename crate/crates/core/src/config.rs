//! The run configuration file (TOML).
//!
//! ```toml
//! version = 1
//!
//! [paths]
//! dataset = "data/market1501"
//! run_dir = "runs/mgn"
//! # pretrained = "resnet50.safetensors"
//!
//! [train]
//! epochs = 80
//! schedule = [[0, 0.01], [40, 0.001], [60, 0.0001]]
//!
//! [train.model]
//! backbone = "resnet50"
//! branches = [
//!   { name = "global", num_parts = 1, final_stage_stride = 2 },
//!   { name = "part2", num_parts = 2, final_stage_stride = 1 },
//!   { name = "part3", num_parts = 3, final_stage_stride = 1 },
//! ]
//!
//! [eval]
//! rerank = false
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{PoolMode, RerankConfig};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Root of a Market-1501 style dataset.
    pub dataset: PathBuf,
    /// Where logs, checkpoints and features go.
    pub run_dir: PathBuf,
    /// Backbone weights archive (torchvision ResNet-50 names).
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default)]
    pub rerank: bool,
    #[serde(default)]
    pub rerank_params: RerankConfig,
    #[serde(default)]
    pub multi_query: bool,
    #[serde(default = "default_pool")]
    pub pool: PoolMode,
    /// Images per forward pass during extraction.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_pool() -> PoolMode {
    PoolMode::Avg
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            rerank: false,
            rerank_params: RerankConfig::default(),
            multi_query: false,
            pool: PoolMode::Avg,
            batch_size: default_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub paths: Paths,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        self.train.validate()
    }

    /// Hash of the whole configuration, first 16 hex digits.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
[paths]
dataset = "data"
run_dir = "run"
[train.model]
backbone = "tiny"
branches = [{ name = "global", num_parts = 1, final_stage_stride = 2 }]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.epochs, 80);
        assert_eq!(cfg.train.loss.margin, 1.2);
        assert_eq!(cfg.eval.rerank_params.k1, 20);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("[train.model]", "[train.model]\nlayers = 3");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("layers"), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        assert!(RunConfig::from_toml(&MINIMAL.replace("version = 1", "version = 2")).is_err());
    }
}
