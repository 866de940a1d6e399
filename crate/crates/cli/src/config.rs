//! The TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use angioseg_core::data::{AugmentPolicy, SynthConfig};
use angioseg_core::train::{RmsPropConfig, TrainConfig};
use angioseg_core::{ArchConfig, Error, LossConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Where `gen` writes images, masks and `manifest.csv`.
    pub data_dir: PathBuf,
    /// Dataset read by `train`, `eval` and `compare`.
    pub manifest: PathBuf,
    /// Output directory of `train`, `eval`, `predict` and `compare`.
    pub out_dir: PathBuf,
    /// Checkpoint read by `predict` and `eval`.
    pub checkpoint: PathBuf,
    /// Weights copied by name into the network before training.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            manifest: "data/manifest.csv".into(),
            out_dir: "runs/default".into(),
            checkpoint: "runs/default/best.vnck".into(),
            init_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub count: usize,
    pub images_per_patient: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            count: 30,
            images_per_patient: 1,
        }
    }
}

/// Optimisation settings; architecture, loss and augmentation have their
/// own tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub lr_decay: f64,
    pub rmsprop: RmsPropConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            lr_decay: t.lr_decay,
            rmsprop: t.rmsprop,
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Train, validation and test fractions of the images.
    pub ratios: [f64; 3],
    /// Select checkpoints by DSC on the training images (overfit runs).
    pub validate_on_train: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.1, 0.2],
            validate_on_train: false,
        }
    }
}

/// Every key has a default, so an empty file is a valid configuration.
/// The top-level `seed` replaces `synth.seed` and seeds splitting and
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Row label in comparison tables; the file stem when empty.
    pub name: String,
    pub seed: u64,
    pub paths: Paths,
    pub gen: GenSection,
    pub synth: SynthConfig,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub train: TrainSection,
    pub split: SplitSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            seed: 0,
            paths: Paths::default(),
            gen: GenSection::default(),
            synth: SynthConfig::default(),
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
            train: TrainSection::default(),
            split: SplitSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.name.is_empty() {
            cfg.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            arch: self.arch.clone(),
            loss: self.loss.clone(),
            lr: self.train.lr,
            lr_decay: self.train.lr_decay,
            rmsprop: self.train.rmsprop,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
            augment: self.augment.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.train_config().validate()
    }
}
