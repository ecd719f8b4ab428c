//! Flat JSON run configuration shared by the command-line tool and tests.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_folder, make_synthetic, split_dataset, Augmentations, DataSource, Dataset, DatasetSpec,
    SYNTHETIC_ATTRS,
};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, Setting};
use crate::training::{OptimizerKind, TrainConfig};

/// File name of the attribute table inside a dataset folder.
pub const ATTR_TABLE: &str = "list_attr.txt";

/// Every knob of a run. Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub setting: Setting,
    /// Seeds model initialization, batch order, augmentation and reparameterization noise.
    pub seed: u64,
    /// `"f32"` or `"f64"`.
    pub dtype: String,

    pub data_source: DataSource,
    pub data_dir: Option<PathBuf>,
    /// Defaults to `<data_dir>/list_attr.txt`.
    pub attr_table: Option<PathBuf>,
    /// Empty means "take them from the data".
    pub attr_names: Vec<String>,
    pub n_synthetic: usize,
    pub data_seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub hflip: bool,
    pub rotate_deg: f64,

    pub latent_dim: usize,
    pub enc_channels: [usize; 4],
    pub label_channels: [usize; 2],
    pub flow_depth: usize,
    pub flow_hidden: usize,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,

    /// Pooling grid of the default feature extractor.
    pub fid_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            setting: Setting::SigmaNf,
            seed: 0,
            dtype: "f32".into(),
            data_source: DataSource::Synthetic,
            data_dir: None,
            attr_table: None,
            attr_names: Vec::new(),
            n_synthetic: 6000,
            data_seed: 0,
            height: 32,
            width: 32,
            train_fraction: 5.0 / 6.0,
            split_seed: 0,
            hflip: true,
            rotate_deg: 10.0,
            latent_dim: 32,
            enc_channels: [16, 32, 64, 64],
            label_channels: [16, 32],
            flow_depth: 4,
            flow_hidden: 64,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 20,
            patience: 3,
            eval_every: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 10.0,
            fid_grid: 8,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pretty JSON with every field present.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!(
                "dtype must be \"f32\" or \"f64\", got {other:?}"
            ))),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let attr_names = match (self.data_source, self.attr_names.is_empty()) {
            (DataSource::Synthetic, true) => SYNTHETIC_ATTRS.iter().map(|s| s.to_string()).collect(),
            _ => self.attr_names.clone(),
        };
        DatasetSpec {
            source: self.data_source,
            height: self.height,
            width: self.width,
            attr_names,
            train_fraction: self.train_fraction,
            split_seed: self.split_seed,
            augment: Augmentations {
                hflip: self.hflip,
                rotate_deg: self.rotate_deg,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            seed: self.seed,
            optimizer: self.optimizer,
            grad_clip: self.grad_clip,
            augment: self.dataset_spec().augment,
        }
    }

    pub fn model_config(&self, attr_dim: usize) -> ModelConfig {
        ModelConfig {
            setting: self.setting,
            channels: 3,
            height: self.height,
            width: self.width,
            latent_dim: self.latent_dim,
            attr_dim,
            enc_channels: self.enc_channels,
            label_channels: self.label_channels,
            flow_depth: self.flow_depth,
            flow_hidden: self.flow_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dtype()?;
        self.dataset_spec().validate()?;
        self.train_config().validate()?;
        if self.fid_grid == 0 {
            return Err(Error::Config("fid_grid must be positive".into()));
        }
        if self.data_source == DataSource::Folder && self.data_dir.is_none() {
            return Err(Error::Config("data_source \"folder\" needs data_dir".into()));
        }
        self.model_config(self.attr_names.len().max(1)).validate()
    }

    /// Loads or generates the full dataset.
    pub fn load_dataset(&self) -> Result<Dataset> {
        self.validate()?;
        let spec = self.dataset_spec();
        match self.data_source {
            DataSource::Synthetic => make_synthetic(self.n_synthetic, &spec, self.data_seed),
            DataSource::Folder => {
                let dir = self.data_dir.as_deref().expect("validated");
                let table = self.attr_table.clone().unwrap_or_else(|| dir.join(ATTR_TABLE));
                load_folder(dir, &table, &spec)
            }
        }
    }

    /// `(train, test)` split of [`RunConfig::load_dataset`].
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        let data = self.load_dataset()?;
        let (train, test) = split_dataset(&data, &self.dataset_spec());
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config(format!(
                "split of {} items leaves an empty train or test set",
                data.len()
            )));
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys_and_echo_round_trips() {
        let cfg = RunConfig::from_json(r#"{"setting": "sigma-nonnf", "seed": 4}"#).unwrap();
        assert_eq!(cfg.setting, Setting::SigmaNonnf);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.latent_dim, RunConfig::default().latent_dim);
        let echoed = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(echoed, cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_invalid_values() {
        assert!(RunConfig::from_json(r#"{"latent_dims": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"setting": "vae"}"#).is_err());
        assert!(RunConfig::from_json("[").is_err());
        for bad in [
            r#"{"dtype": "f16"}"#,
            r#"{"batch_size": 0}"#,
            r#"{"train_fraction": 1.0}"#,
            r#"{"data_source": "folder"}"#,
            r#"{"height": 0}"#,
        ] {
            assert!(RunConfig::from_json(bad).unwrap().validate().is_err(), "{bad}");
        }
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn default_split_is_five_to_one() {
        let cfg = RunConfig {
            n_synthetic: 60,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let (train, test) = cfg.load_split().unwrap();
        assert_eq!((train.len(), test.len()), (50, 10));
        assert_eq!(train.attr_names().len(), 5);
    }

    #[test]
    fn adaptive_moment_alias() {
        let cfg = RunConfig::from_json(r#"{"optimizer": "adaptive-moment"}"#).unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
    }
}
