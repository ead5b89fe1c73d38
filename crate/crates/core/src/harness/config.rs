use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar100, shapes_splits, DatasetSplits};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::san::{SelectorConfig, Stage};
use crate::sanvit::{IndexSource, PeVariant, SanVitConfig};
use crate::vit::{PeMode, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar100,
    Shapes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Shapes only; CIFAR-100 is always 32px.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Shapes generator seed, independent of the training seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    64
}
fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TeacherVit,
    SimpleVit,
    Selector,
    Sanvit,
}

/// Selector architecture knobs; input size and grid come from `vit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorOptions {
    pub stages: Vec<Stage>,
    pub stem_stride: usize,
    pub pos_weight: f32,
}

impl Default for SelectorOptions {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage { channels: 32, blocks: 2 },
                Stage { channels: 64, blocks: 2 },
                Stage { channels: 128, blocks: 2 },
            ],
            stem_stride: 4,
            pos_weight: 1.0,
        }
    }
}

/// One run. Relative paths resolve against the directory handed to the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelKind,
    /// Teacher or baseline architecture; the student's base; the selector's grid.
    pub vit: ViTConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub pe_variant: PeVariant,
    #[serde(default)]
    pub index_source: IndexSource,
    #[serde(default)]
    pub selector: SelectorOptions,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augmentation: bool,
    /// Saccade-target file (selector training, ground-truth student indices).
    #[serde(default)]
    pub targets: Option<PathBuf>,
    /// Teacher checkpoint; targets are built from it when `targets` is absent.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Selector checkpoint for a student with `index_source = san`.
    #[serde(default)]
    pub selector_checkpoint: Option<PathBuf>,
}

fn default_k() -> usize {
    8
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and early_stop_patience must be positive".into()));
        }
        match self.model {
            ModelKind::Selector => self.selector_config()?.validate(),
            ModelKind::Sanvit => self.sanvit_config().validate(),
            _ => Ok(()),
        }
    }

    pub fn selector_config(&self) -> Result<SelectorConfig> {
        let cfg = SelectorConfig {
            stages: self.selector.stages.clone(),
            input_size: self.vit.image_size,
            num_patches: self.vit.num_patches(),
            k: self.k,
            stem_stride: self.selector.stem_stride,
            pos_weight: self.selector.pos_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sanvit_config(&self) -> SanVitConfig {
        SanVitConfig {
            base: self.vit.clone(),
            k: self.k,
            pe_variant: self.pe_variant,
            index_source: self.index_source,
        }
    }

    /// Stored targets reference un-augmented images, so they force augmentation off.
    pub fn effective_augmentation(&self) -> bool {
        match self.model {
            ModelKind::Selector => false,
            ModelKind::Sanvit => self.augmentation && self.index_source == IndexSource::San,
            _ => self.augmentation,
        }
    }

    /// The desk-scale three-model comparison on 64px shapes.
    pub fn desk(model: ModelKind) -> Self {
        let vit = ViTConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 3,
            pe_mode: PeMode::Sinusoidal,
            dropout: 0.0,
        };
        let name = match model {
            ModelKind::TeacherVit => "teacher",
            ModelKind::SimpleVit => "simple_vit",
            ModelKind::Selector => "selector",
            ModelKind::Sanvit => "sanvit",
        };
        Self {
            name: name.into(),
            dataset: DatasetConfig {
                kind: DatasetKind::Shapes,
                image_size: 64,
                n_train: default_n_train(),
                n_test: default_n_test(),
                seed: 0,
            },
            model,
            vit,
            k: 8,
            pe_variant: PeVariant::SinFullPreslice,
            index_source: IndexSource::San,
            selector: SelectorOptions::default(),
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            batch_size: 32,
            max_epochs: match model {
                ModelKind::TeacherVit | ModelKind::SimpleVit => 12,
                ModelKind::Selector => 8,
                ModelKind::Sanvit => 15,
            },
            early_stop_patience: default_patience(),
            // the baseline shares the teacher's architecture but not its initialisation
            seed: (model == ModelKind::SimpleVit) as u64,
            augmentation: false,
            targets: (model == ModelKind::Sanvit).then(|| PathBuf::from("selector/targets.sact")),
            teacher_checkpoint: (model == ModelKind::Selector).then(|| PathBuf::from("teacher/checkpoint.sanw")),
            selector_checkpoint: (model == ModelKind::Sanvit).then(|| PathBuf::from("selector/checkpoint.sanw")),
        }
    }
}

/// Materialise the configured dataset. `data_dir` holds the CIFAR-100 binaries.
pub fn load_dataset(config: &DatasetConfig, data_dir: Option<&Path>) -> Result<DatasetSplits> {
    match config.kind {
        DatasetKind::Shapes => Ok(shapes_splits(config.n_train, config.n_test, config.seed, config.image_size)),
        DatasetKind::Cifar100 => {
            let dir = data_dir.ok_or_else(|| Error::Config("cifar100 needs --data <dir>".into()))?;
            load_cifar100(dir)
        }
    }
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
