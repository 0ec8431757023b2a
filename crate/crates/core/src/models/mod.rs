//! Architectures, training with early stopping, and the transfer-learning
//! head swap.

mod build;
pub(crate) mod train;
mod transfer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_ingest::Label;
use crate::balance::BalanceError;
use crate::evalcv::EvalError;
use crate::nn::NnError;

pub use build::{
    build_cnn, build_lstm, build_network, build_pretrain_network, build_resnet_mini, PretrainShape,
    RESNET_STEM_FILTERS,
};
pub use train::{
    derive_seed, input_shape, train, train_with_scaling, train_with_validation, validation_split, Classifier, EpochRecord,
    Standardizer, TrainConfig, TrainOutcome,
};
pub use transfer::{backbone_checksum, backbone_len, finetune, head_swap, pretrain, pretrained_scaling, HEAD_UNITS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no training examples")]
    EmptyTraining,
    #[error("no validation examples")]
    EmptyValidation,
    #[error("label {label} is not part of the {task} task")]
    LabelOutsideTask { label: Label, task: Task },
    #[error("cough label {0} is not allowed in pre-training data")]
    CoughInPretraining(Label),
    #[error("classes must be 2 or 3, got {0}")]
    ClassCount(usize),
    #[error("input {0:?} too small for the architecture: {1}")]
    InputTooSmall(Vec<usize>, String),
    #[error("checkpoint has no two-layer dense head to replace")]
    MissingHead,
    #[error("epoch {epoch}: {message}")]
    NonFiniteLoss { epoch: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Label set and class indices of a classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// TB (0) against COVID-19 (1); COVID-19 is the positive class.
    TwoClass,
    /// TB, COVID-19, healthy.
    ThreeClass,
    /// Sneeze, speech, noise.
    Pretrain,
}

impl Task {
    pub fn labels(self) -> &'static [Label] {
        match self {
            Task::TwoClass => &[Label::Tb, Label::Covid19],
            Task::ThreeClass => &[Label::Tb, Label::Covid19, Label::Healthy],
            Task::Pretrain => &[Label::Sneeze, Label::Speech, Label::Noise],
        }
    }

    pub fn classes(self) -> usize {
        self.labels().len()
    }

    pub fn class_index(self, label: Label) -> Result<usize, ModelError> {
        self.labels()
            .iter()
            .position(|&l| l == label)
            .ok_or(ModelError::LabelOutsideTask { label, task: self })
    }

    /// Positive class index for binary tasks.
    pub fn positive_class(self) -> Option<usize> {
        (self == Task::TwoClass).then_some(1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::TwoClass => "two_class",
            Task::ThreeClass => "three_class",
            Task::Pretrain => "pretrain",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "two_class" => Ok(Task::TwoClass),
            "three_class" => Ok(Task::ThreeClass),
            "pretrain" => Ok(Task::Pretrain),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Cnn,
    Lstm,
    ResnetMini,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Cnn => "cnn",
            Architecture::Lstm => "lstm",
            Architecture::ResnetMini => "resnet_mini",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cnn" => Ok(Architecture::Cnn),
            "lstm" => Ok(Architecture::Lstm),
            "resnet_mini" | "resnet" => Ok(Architecture::ResnetMini),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

pub const CONV_FILTER_GRID: [usize; 3] = [24, 48, 96];
pub const KERNEL_GRID: [usize; 2] = [2, 3];
pub const DROPOUT_GRID: [f64; 3] = [0.1, 0.3, 0.5];
pub const DENSE_GRID: [usize; 2] = [16, 32];
pub const LSTM_UNITS_GRID: [usize; 3] = [64, 128, 256];
pub const LEARNING_RATE_GRID: [f64; 3] = [1e-2, 1e-3, 1e-4];
pub const BATCH_SIZE_GRID: [usize; 3] = [64, 128, 256];

/// Classifier hyperparameters. Fields missing from serialized input take
/// their default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub conv_filters: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub dense_units: usize,
    pub lstm_units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            conv_filters: 24,
            kernel_size: 2,
            dropout: 0.3,
            dense_units: 32,
            lstm_units: 64,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

impl ClassifierConfig {
    /// True when every field lies on the search grid.
    pub fn in_grid(&self) -> bool {
        CONV_FILTER_GRID.contains(&self.conv_filters)
            && KERNEL_GRID.contains(&self.kernel_size)
            && DROPOUT_GRID.contains(&self.dropout)
            && DENSE_GRID.contains(&self.dense_units)
            && LSTM_UNITS_GRID.contains(&self.lstm_units)
            && LEARNING_RATE_GRID.contains(&self.learning_rate)
            && BATCH_SIZE_GRID.contains(&self.batch_size)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.conv_filters == 0 || self.kernel_size == 0 || self.dense_units == 0 || self.lstm_units == 0 {
            return bad("layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }

    /// Grid points for an architecture, varying only the fields it uses.
    /// Unused fields keep their default value.
    pub fn grid(arch: Architecture) -> Vec<ClassifierConfig> {
        let base = ClassifierConfig::default();
        let mut out = Vec::new();
        for &learning_rate in &LEARNING_RATE_GRID {
            for &batch_size in &BATCH_SIZE_GRID {
                let tuned = ClassifierConfig {
                    learning_rate,
                    batch_size,
                    ..base
                };
                match arch {
                    Architecture::ResnetMini => out.push(tuned),
                    Architecture::Cnn => {
                        for &conv_filters in &CONV_FILTER_GRID {
                            for &kernel_size in &KERNEL_GRID {
                                for &dropout in &DROPOUT_GRID {
                                    for &dense_units in &DENSE_GRID {
                                        out.push(ClassifierConfig {
                                            conv_filters,
                                            kernel_size,
                                            dropout,
                                            dense_units,
                                            ..tuned
                                        });
                                    }
                                }
                            }
                        }
                    }
                    Architecture::Lstm => {
                        for &lstm_units in &LSTM_UNITS_GRID {
                            for &dropout in &DROPOUT_GRID {
                                for &dense_units in &DENSE_GRID {
                                    out.push(ClassifierConfig {
                                        lstm_units,
                                        dropout,
                                        dense_units,
                                        ..tuned
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
