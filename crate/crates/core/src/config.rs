//! Run configuration: one TOML document with a section per stage.
//!
//! Every field has a default, unknown keys are rejected, and the hash is
//! taken over a canonical (key-sorted) JSON rendering so it does not depend
//! on field order in the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{SplitSpec, SynthParams};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::featurize::FeaturizeConfig;
use crate::model::Geometry;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic generator settings used by `generate`.
    pub synth: SynthParams,
    pub split: SplitSpec,
    pub split_seed: u64,
    /// End-of-life threshold on normalized capacity.
    pub eol_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthParams::default(),
            split: SplitSpec::Ratio {
                train_fraction: 2.0 / 3.0,
            },
            split_seed: 0,
            eol_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub featurize: FeaturizeConfig,
    pub model: Geometry,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(Error::file(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.featurize.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.height != self.featurize.early_cycles || self.model.width != self.featurize.grid_points {
            return Err(Error::Config(format!(
                "model input {}x{} must equal featurize early_cycles x grid_points ({}x{})",
                self.model.height, self.model.width, self.featurize.early_cycles, self.featurize.grid_points
            )));
        }
        if !(self.data.eol_threshold > 0.0 && self.data.eol_threshold < 1.0) {
            return Err(Error::Config("data.eol_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        format!("{:x}", Sha256::digest(value.to_string().as_bytes()))
    }
}
