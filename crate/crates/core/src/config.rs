//! Run configuration: one TOML file with a section per module.
//!
//! ```toml
//! [model]      # network architecture
//! [baseline]   # comparator architecture
//! [train]      # optimizer, epochs, seed, points per shape
//! [augment]    # training augmentation
//! [data]       # dataset root, category, label base
//! ```
//!
//! Every section and key is optional; unknown sections or keys are rejected.
//! Command-line flags override file values, which override defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::{BaselineConfig, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub category: Option<String>,
    /// Subtracted from every stored part id (1 for datasets numbering parts from 1).
    pub label_base: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            category: None,
            label_base: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    /// Whether the part count was given explicitly (otherwise it is read from the labels).
    #[serde(skip)]
    pub parts_explicit: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub category: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub points: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.parts_explicit = raw
            .get("model")
            .and_then(|m| m.as_table())
            .is_some_and(|m| m.contains_key("num_parts"));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(r) = &o.data_root {
            self.data.root = r.clone();
        }
        if let Some(c) = &o.category {
            self.data.category = Some(c.clone());
            self.train.category = Some(c.clone());
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(p) = o.points {
            self.train.points = p;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| section("model", e))?;
        self.baseline.validate().map_err(|e| section("baseline", e))?;
        self.train.validate().map_err(|e| section("train", e))?;
        self.augment.validate().map_err(|e| section("augment", e))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }
}

fn section(name: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("[{name}] {msg}")),
        other => other,
    }
}
