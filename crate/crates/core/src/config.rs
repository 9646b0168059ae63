//! Top-level run configuration read from JSON files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{SlidingWindowConfig, TtaConfig};
use crate::network::ArchConfig;
use crate::phantom::PhantomConfig;
use crate::postprocess::{Connectivity, THRESHOLD_PERCENTILE};
use crate::training::{PretrainConfig, TrainConfig};

/// Floating-point type used for training and inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub connectivity: Connectivity,
    pub percentile: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { connectivity: Connectivity::default(), percentile: THRESHOLD_PERCENTILE }
    }
}

/// Everything a run needs besides data paths. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub sliding_window: SlidingWindowConfig,
    pub tta: TtaConfig,
    pub postprocess: PostprocessConfig,
    pub phantom: PhantomConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.sliding_window.validate()?;
        if !(0.0..=100.0).contains(&self.postprocess.percentile) {
            return Err(Error::Config(format!("percentile must be in [0, 100], got {}", self.postprocess.percentile)));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::parse(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }
}
