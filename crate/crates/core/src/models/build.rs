use serde::{Deserialize, Serialize};

use super::{Architecture, ClassifierConfig, ModelError};
use crate::nn::{LayerSpec, NetworkSpec, NnError};

/// Channels of the residual network's stem convolution.
pub const RESNET_STEM_FILTERS: usize = 16;
const RESNET_DENSE_UNITS: usize = 512;

/// Layer widths of the pre-training networks. The default is the full-size
/// layout; tests and quick runs shrink it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainShape {
    pub conv_filters: Vec<usize>,
    pub kernel_size: usize,
    pub lstm_units: Vec<usize>,
    pub resnet_depth: usize,
    /// Widths of the two hidden dense layers before the 3-way output.
    pub dense_units: [usize; 2],
    pub dropout: f64,
}

impl Default for PretrainShape {
    fn default() -> Self {
        PretrainShape {
            conv_filters: vec![256, 128, 64],
            kernel_size: 2,
            lstm_units: vec![512, 256, 128],
            resnet_depth: 4,
            dense_units: [512, 128],
            dropout: 0.3,
        }
    }
}

fn check_classes(classes: usize) -> Result<(), ModelError> {
    if classes == 2 || classes == 3 {
        Ok(())
    } else {
        Err(ModelError::ClassCount(classes))
    }
}

fn finish(input_shape: &[usize], classes: usize, layers: Vec<LayerSpec>) -> Result<NetworkSpec, ModelError> {
    let spec = NetworkSpec {
        input_shape: input_shape.to_vec(),
        classes,
        layers,
    };
    match spec.validate() {
        Ok(()) => Ok(spec),
        Err(NnError::Spec { layer, message }) => Err(ModelError::InputTooSmall(
            input_shape.to_vec(),
            format!("layer {layer}: {message}"),
        )),
        Err(e) => Err(e.into()),
    }
}

/// Single convolution stage followed by a small dense classifier.
pub fn build_cnn(cfg: &ClassifierConfig, input_shape: &[usize], classes: usize) -> Result<NetworkSpec, ModelError> {
    check_classes(classes)?;
    cfg.validate()?;
    let layers = vec![
        LayerSpec::conv(cfg.conv_filters, cfg.kernel_size),
        LayerSpec::Relu,
        LayerSpec::Maxpool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dropout { rate: cfg.dropout },
        LayerSpec::dense(cfg.dense_units),
        LayerSpec::Relu,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ];
    finish(input_shape, classes, layers)
}

/// One LSTM over the frame sequence, reading each frame's feature column as
/// a time step.
pub fn build_lstm(cfg: &ClassifierConfig, input_shape: &[usize], classes: usize) -> Result<NetworkSpec, ModelError> {
    check_classes(classes)?;
    cfg.validate()?;
    let layers = vec![
        LayerSpec::Sequence,
        LayerSpec::Lstm {
            units: cfg.lstm_units,
            return_sequences: false,
        },
        LayerSpec::Dropout { rate: cfg.dropout },
        LayerSpec::dense(cfg.dense_units),
        LayerSpec::Relu,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ];
    finish(input_shape, classes, layers)
}

fn resnet_backbone(depth_blocks: usize) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::Conv2d {
            filters: RESNET_STEM_FILTERS,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Batchnorm,
        LayerSpec::Relu,
        LayerSpec::Maxpool2x2,
    ];
    for block in 0..depth_blocks {
        layers.push(LayerSpec::ResidualBlock {
            filters: RESNET_STEM_FILTERS << block,
            stride: if block == 0 { 1 } else { 2 },
        });
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

/// Stem convolution, `depth_blocks` residual blocks doubling the channels
/// after the first, global average pooling and a dense head.
pub fn build_resnet_mini(depth_blocks: usize, input_shape: &[usize], classes: usize) -> Result<NetworkSpec, ModelError> {
    check_classes(classes)?;
    if depth_blocks == 0 {
        return Err(ModelError::Config("depth_blocks must be >= 1".into()));
    }
    let mut layers = resnet_backbone(depth_blocks);
    layers.extend([
        LayerSpec::dense(RESNET_DENSE_UNITS),
        LayerSpec::Relu,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ]);
    finish(input_shape, classes, layers)
}

pub fn build_network(
    arch: Architecture,
    cfg: &ClassifierConfig,
    resnet_depth: usize,
    input_shape: &[usize],
    classes: usize,
) -> Result<NetworkSpec, ModelError> {
    match arch {
        Architecture::Cnn => build_cnn(cfg, input_shape, classes),
        Architecture::Lstm => build_lstm(cfg, input_shape, classes),
        Architecture::ResnetMini => build_resnet_mini(resnet_depth, input_shape, classes),
    }
}

/// Three-class network for sneeze/speech/noise pre-training, ending in
/// `dense(d0) -> dropout -> dense(d1) -> dense(3)`.
pub fn build_pretrain_network(
    arch: Architecture,
    shape: &PretrainShape,
    input_shape: &[usize],
) -> Result<NetworkSpec, ModelError> {
    let mut layers = Vec::new();
    match arch {
        Architecture::Cnn => {
            for &filters in &shape.conv_filters {
                layers.extend([LayerSpec::conv(filters, shape.kernel_size), LayerSpec::Relu, LayerSpec::Maxpool2x2]);
            }
            layers.push(LayerSpec::Flatten);
        }
        Architecture::Lstm => {
            layers.push(LayerSpec::Sequence);
            let n = shape.lstm_units.len();
            for (i, &units) in shape.lstm_units.iter().enumerate() {
                layers.push(LayerSpec::Lstm {
                    units,
                    return_sequences: i + 1 < n,
                });
            }
        }
        Architecture::ResnetMini => {
            if shape.resnet_depth == 0 {
                return Err(ModelError::Config("resnet_depth must be >= 1".into()));
            }
            layers.extend(resnet_backbone(shape.resnet_depth));
        }
    }
    layers.extend([
        LayerSpec::dense(shape.dense_units[0]),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: shape.dropout },
        LayerSpec::dense(shape.dense_units[1]),
        LayerSpec::Relu,
        LayerSpec::dense(3),
        LayerSpec::Softmax,
    ]);
    finish(input_shape, 3, layers)
}
