//! TOML run configuration. Every section and key is optional; a missing key
//! takes the value from [`RunConfig::default`] for that section. Unknown keys
//! anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{gen_cluttered, load_dataset, Dataset, SyntheticCfg};
use crate::error::{Error, Result};
use crate::training::{MethodConfig, TrainConfig};

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticCfg),
    /// A dataset file in the `TDDS` format; relative paths resolve against
    /// the config file's directory.
    File {
        path: PathBuf,
    },
}

impl DataSource {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => gen_cluttered(cfg),
            DataSource::File { path } => load_dataset(&base.join(path)),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        match self {
            DataSource::Synthetic(cfg) => cfg
                .validate()
                .map_err(|e| Error::Config(format!("[{what}]: {e}"))),
            DataSource::File { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub method: MethodConfig,
    /// Supervised backbone training on `pretrain_data`.
    pub pretrain: TrainConfig,
    /// Top-down training on `pretune_data` against the frozen backbone.
    pub pretune: TrainConfig,
    /// Downstream training on `train_data`, evaluated on `val_data`.
    pub tune: TrainConfig,
    pub pretrain_data: DataSource,
    pub pretune_data: DataSource,
    pub train_data: DataSource,
    pub val_data: DataSource,
    /// Directory that relative data paths resolve against; set by
    /// [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generic = SyntheticCfg::generic();
        RunConfig {
            backbone: BackboneConfig::default(),
            method: MethodConfig::default(),
            pretrain: TrainConfig::default(),
            pretune: TrainConfig {
                learning_rate: 1e-2,
                epochs: 5,
                ..TrainConfig::default()
            },
            tune: TrainConfig {
                learning_rate: 1e-2,
                epochs: 15,
                ..TrainConfig::default()
            },
            // Generic classes with the marker moved onto the clutter, as in
            // the default downstream task.
            pretune_data: DataSource::Synthetic(SyntheticCfg {
                seed: generic.seed + 3,
                marker_on_signal: false,
                marker_on_distractors: true,
                ..generic.clone()
            }),
            pretrain_data: DataSource::Synthetic(generic),
            train_data: DataSource::Synthetic(SyntheticCfg {
                seed: 1,
                ..SyntheticCfg::default()
            }),
            val_data: DataSource::Synthetic(SyntheticCfg {
                seed: 2,
                n_images: 500,
                ..SyntheticCfg::default()
            }),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.base_dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.method.validate(&self.backbone)?;
        for (t, what) in [
            (&self.pretrain, "pretrain"),
            (&self.pretune, "pretune"),
            (&self.tune, "tune"),
        ] {
            t.validate()
                .map_err(|e| Error::Config(format!("[{what}]: {e}")))?;
        }
        for (d, what) in [
            (&self.pretrain_data, "pretrain_data"),
            (&self.pretune_data, "pretune_data"),
            (&self.train_data, "train_data"),
            (&self.val_data, "val_data"),
        ] {
            d.validate(what)?;
        }
        Ok(())
    }

    pub fn dataset(&self, source: &DataSource) -> Result<Dataset> {
        source.load(&self.base_dir)
    }
}

/// Overlays `over` on `base` key by key. A table whose `source` differs from
/// the base's replaces it outright, so fields of the old source don't linger.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if b.get("source") == o.get("source") || o.get("source").is_none() =>
            {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
