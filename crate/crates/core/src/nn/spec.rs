use serde::{Deserialize, Serialize};

use super::NnError;

/// One layer of a network description.
///
/// Per-item shapes are `[C, H, W]` for images, `[T, D]` for sequences and
/// `[N]` for vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Maxpool2x2,
    Dense {
        units: usize,
    },
    Relu,
    Softmax,
    Dropout {
        rate: f64,
    },
    Flatten,
    /// Reads an image `[C, H, W]` as a length-`W` sequence of `C*H`-vectors,
    /// i.e. one time step per frame column.
    Sequence,
    Lstm {
        units: usize,
        return_sequences: bool,
    },
    /// Two 3x3 conv + batchnorm stages with an identity shortcut, or a 1x1
    /// projection when the channel count or stride changes.
    ResidualBlock {
        filters: usize,
        stride: usize,
    },
    Batchnorm,
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool2x2 => "maxpool2x2",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Sequence => "sequence",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        let image = |what: &str| -> Result<(usize, usize, usize), String> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(format!("{what} needs a [C, H, W] input, got {input:?}")),
            }
        };
        match self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (_, h, w) = image("conv2d")?;
                if *filters == 0 || *kernel == 0 || *stride == 0 {
                    return Err("conv2d parameters must be positive".into());
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(format!("input {h}x{w} smaller than kernel {kernel}"));
                }
                Ok(vec![
                    *filters,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Maxpool2x2 => {
                let (c, h, w) = image("maxpool2x2")?;
                if h < 2 || w < 2 {
                    return Err(format!("input {h}x{w} too small to pool"));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Dense { units } => match input {
                [_] if *units > 0 => Ok(vec![*units]),
                [_] => Err("dense needs at least one unit".into()),
                _ => Err(format!("dense needs a flat input, got {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(rate) {
                    Ok(input.to_vec())
                } else {
                    Err(format!("dropout rate {rate} outside [0, 1)"))
                }
            }
            LayerSpec::Softmax => match input {
                [_] => Ok(input.to_vec()),
                _ => Err(format!("softmax needs a flat input, got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Sequence => {
                let (c, h, w) = image("sequence")?;
                Ok(vec![w, c * h])
            }
            LayerSpec::Lstm {
                units,
                return_sequences,
            } => match input {
                [t, _] if *units > 0 => Ok(if *return_sequences {
                    vec![*t, *units]
                } else {
                    vec![*units]
                }),
                [_, _] => Err("lstm needs at least one unit".into()),
                _ => Err(format!("lstm needs a [T, D] input, got {input:?}")),
            },
            LayerSpec::ResidualBlock { filters, stride } => {
                let (_, h, w) = image("residual_block")?;
                if *filters == 0 || *stride == 0 {
                    return Err("residual block parameters must be positive".into());
                }
                Ok(vec![*filters, (h - 1) / stride + 1, (w - 1) / stride + 1])
            }
            LayerSpec::Batchnorm => match input {
                [_] | [_, _, _] => Ok(input.to_vec()),
                _ => Err(format!("batchnorm needs [N] or [C, H, W], got {input:?}")),
            },
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = image("global_avg_pool")?;
                Ok(vec![c])
            }
        }
    }
}

/// Ordered layer list with its per-item input shape and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Per-item input shape of every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|message| NnError::Spec { layer: i, message })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let shapes = self.shapes()?;
        let last = self.layers.len().saturating_sub(1);
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(NnError::Spec {
                layer: last,
                message: "network must end with softmax".into(),
            });
        }
        if shapes.last().unwrap() != &vec![self.classes] {
            return Err(NnError::Spec {
                layer: last,
                message: format!(
                    "output shape {:?} does not match {} classes",
                    shapes.last().unwrap(),
                    self.classes
                ),
            });
        }
        Ok(())
    }

    /// Indices of the dense layers, in order.
    pub fn dense_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Widths of the dense layers, in order.
    pub fn dense_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect()
    }
}
