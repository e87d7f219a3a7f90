//! The JSON run configuration accepted by `znet train`.
//!
//! ```json
//! {
//!   "arch": { "name": "zunet-v2", "levels": 3, "base_channels": 8 },
//!   "policy": "patch512",
//!   "train": { "initial_lr": 0.05, "momentum": 0.9, "epochs": 4, "batch_size": 2, "augment": "all_rotations" },
//!   "data": { "split": "two_fold_10_2_8", "fold": 0, "normalize": true },
//!   "seed": 0
//! }
//! ```
//!
//! Every section and field is optional and falls back to the values above.
//! `policy` is either a policy name or a full object with `name`, `patch`,
//! `train_stride` and `eval_stride`. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use znet_core::data::{PatchPolicy, SplitScheme};
use znet_core::models::ArchConfig;
use znet_core::train::{Augment, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub name: String,
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection { name: "zunet-v2".into(), levels: 3, base_channels: 8 }
    }
}

impl ArchSection {
    pub fn resolve(&self) -> Result<ArchConfig> {
        let base: ArchConfig = self.name.parse()?;
        let cfg = ArchConfig { levels: self.levels, base_channels: self.base_channels, ..base };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySection {
    Named(String),
    Custom(PatchPolicy),
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection::Named("patch512".into())
    }
}

impl PolicySection {
    pub fn resolve(&self) -> Result<PatchPolicy> {
        match self {
            PolicySection::Named(n) => Ok(PatchPolicy::by_name(n)?),
            PolicySection::Custom(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub initial_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: Augment,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            initial_lr: d.initial_lr,
            momentum: d.momentum,
            epochs: d.epochs,
            batch_size: d.batch_size,
            augment: d.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub split: SplitScheme,
    pub fold: usize,
    /// Divide every image by its maximum before use.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { split: SplitScheme::TwoFold10_2_8, fold: 0, normalize: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub arch: ArchSection,
    pub policy: PolicySection,
    pub train: TrainSection,
    pub data: DataSection,
    pub seed: u64,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing run config {}", path.display()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            initial_lr: self.train.initial_lr,
            momentum: self.train.momentum,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            augment: self.train.augment,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let c: RunConfigFile = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfigFile::default());
        let c: RunConfigFile =
            serde_json::from_str(r#"{"arch": {"name": "unet"}, "policy": "cube16", "seed": 4}"#).unwrap();
        assert_eq!(c.arch.resolve().unwrap().name(), "unet");
        assert_eq!(c.policy.resolve().unwrap().name, "cube16");
        assert_eq!(c.train_config().seed, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfigFile>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfigFile>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn custom_policy_and_split() {
        let c: RunConfigFile = serde_json::from_str(
            r#"{"policy": {"name": "slab4", "patch": ["full", "full", 4],
                "train_stride": ["full", "full", 1], "eval_stride": ["full", "full", 4]},
                "data": {"split": {"custom": {"train": 10, "val": 2, "test": 4}}}}"#,
        )
        .unwrap();
        assert_eq!(c.policy.resolve().unwrap().patch_size([16, 16, 20]), [16, 16, 4]);
        assert_eq!(c.data.split, SplitScheme::Custom { train: 10, val: 2, test: 4 });
        let round: RunConfigFile = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }
}
