use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use coughpipe::features::{FeatureConfig, FRAME_COUNT_GRID, FRAME_LEN_GRID, MFCC_GRID};
use coughpipe::models::{Architecture, ClassifierConfig, PretrainShape, Task, TrainConfig, LEARNING_RATE_GRID};

use crate::args::RunArgs;

pub const CACHE_ENV: &str = "COUGHPIPE_CACHE";

/// One (M, F, S) feature setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureChoice {
    pub n_mfcc: usize,
    pub frame_len: usize,
    pub n_frames: usize,
}

impl FeatureChoice {
    pub fn config(&self) -> FeatureConfig {
        FeatureConfig::new(self.n_mfcc, self.frame_len, self.n_frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridName {
    /// Every value of every axis.
    Full,
    /// A small grid for quick runs.
    Reduced,
}

/// A named grid or an explicit list of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid<T> {
    Named(GridName),
    Points(Vec<T>),
}

impl Grid<FeatureChoice> {
    pub fn configs(&self) -> Vec<FeatureConfig> {
        match self {
            Grid::Named(GridName::Full) => FeatureConfig::full_grid(),
            Grid::Named(GridName::Reduced) => vec![FeatureConfig::new(MFCC_GRID[0], FRAME_LEN_GRID[1], FRAME_COUNT_GRID[0])],
            Grid::Points(points) => points.iter().map(FeatureChoice::config).collect(),
        }
    }
}

impl Grid<ClassifierConfig> {
    pub fn configs(&self, arch: Architecture) -> Vec<ClassifierConfig> {
        match self {
            Grid::Named(GridName::Full) => ClassifierConfig::grid(arch),
            Grid::Named(GridName::Reduced) => LEARNING_RATE_GRID[..2]
                .iter()
                .map(|&learning_rate| ClassifierConfig {
                    learning_rate,
                    ..Default::default()
                })
                .collect(),
            Grid::Points(points) => points.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub features: FeatureChoice,
    pub shape: PretrainShape,
    pub classifier: ClassifierConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub smote_neighbors: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let f = FeatureConfig::pretraining();
        PretrainSettings {
            features: FeatureChoice {
                n_mfcc: f.n_mfcc,
                frame_len: f.frame_len,
                n_frames: f.n_frames,
            },
            shape: PretrainShape::default(),
            classifier: ClassifierConfig::default(),
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            smote_neighbors: 5,
        }
    }
}

/// Settings of a run. Precedence is command-line flags, then the JSON
/// config file, then these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub pretrain_manifest: Option<PathBuf>,
    pub task: Task,
    pub arch: Architecture,
    pub transfer: bool,
    /// Checkpoint to fine-tune from in transfer mode. Without one, transfer
    /// mode pre-trains first.
    pub pretrained: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
    pub workers: Option<usize>,
    pub features: Grid<FeatureChoice>,
    pub classifiers: Grid<ClassifierConfig>,
    pub resnet_depth: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub smote_neighbors: usize,
    pub pretraining: PretrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            pretrain_manifest: None,
            task: Task::TwoClass,
            arch: Architecture::Cnn,
            transfer: false,
            pretrained: None,
            seed: None,
            out: PathBuf::from("coughpipe-out"),
            cache: None,
            workers: None,
            features: Grid::Named(GridName::Reduced),
            classifiers: Grid::Named(GridName::Reduced),
            resnet_depth: 2,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            smote_neighbors: 5,
            pretraining: PretrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Config file (if any) overlaid with the flags that were given.
    pub fn resolve(args: &RunArgs) -> anyhow::Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        if let Some(v) = &args.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = &args.pretrain_manifest {
            cfg.pretrain_manifest = Some(v.clone());
        }
        if let Some(v) = args.task {
            cfg.task = v;
        }
        if let Some(v) = args.arch {
            cfg.arch = v;
        }
        cfg.transfer |= args.transfer;
        if let Some(v) = &args.pretrained {
            cfg.pretrained = Some(v.clone());
        }
        if let Some(v) = args.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = &args.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &args.cache {
            cfg.cache = Some(v.clone());
        }
        if let Some(v) = args.workers {
            cfg.workers = Some(v);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => bail!("a seed is required: pass --seed or set \"seed\" in the config file"),
        }
    }

    /// Flag or config value, then `COUGHPIPE_CACHE`, then `<out>/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        self.cache
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| self.out.join("cache"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: 0,
            validation_fraction: self.validation_fraction,
        }
    }
}
