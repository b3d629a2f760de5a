//! Run configuration file for `gaitlab train`.

use std::fs;
use std::path::{Path, PathBuf};

use gaitlab::geometry::SensorIntrinsics;
use gaitlab::hmrnet::HmrConfig;
use gaitlab::training::TrainConfig;
use gaitlab::{GaitError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Width {
    Tiny,
    Compact,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: Width,
    pub use_acm: bool,
    pub use_mafe: bool,
    pub use_gsfe: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: Width::Full,
            use_acm: true,
            use_mafe: true,
            use_gsfe: true,
        }
    }
}

impl ModelSection {
    pub fn net(&self, num_classes: usize) -> HmrConfig {
        let base = match self.width {
            Width::Tiny => HmrConfig::tiny(num_classes),
            Width::Compact => HmrConfig::compact(num_classes),
            Width::Full => HmrConfig {
                num_classes,
                ..HmrConfig::default()
            },
        };
        HmrConfig {
            use_acm: self.use_acm,
            use_mafe: self.use_mafe,
            use_gsfe: self.use_gsfe,
            ..base
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root; the `--data` flag wins.
    pub root: Option<PathBuf>,
    /// Output directory; the `--out` flag wins.
    pub out: Option<PathBuf>,
    /// Training subjects; the index's train split when absent.
    pub train_subjects: Option<Vec<u32>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sensor: SensorIntrinsics,
    pub model: ModelSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GaitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GaitError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sensor.validate()?;
        self.model.net(2).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.train.total_iterations = 50;
        cfg.train.train_sequences = Some(vec![0, 1]);
        cfg.model.width = Width::Tiny;
        cfg.model.use_mafe = false;
        cfg.data.train_subjects = Some(vec![3, 5]);
        let once = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(once, cfg);
        assert_eq!(RunConfig::parse(&once.to_toml()).unwrap(), once);
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        assert!(RunConfig::parse("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("colour = 1\n").is_err());
        assert!(RunConfig::parse("[train]\nlr = -1.0\n").is_err());
        assert!(RunConfig::parse("[sensor]\nh = 0\n").is_err());
        assert!(RunConfig::parse("[model]\nwidth = \"huge\"\n").is_err());
        let partial = RunConfig::parse("[train]\ntotal_iterations = 7\n").unwrap();
        assert_eq!(partial.train.total_iterations, 7);
        assert_eq!(partial.train.lr, TrainConfig::default().lr);
    }
}
