use serde::Serialize;

use super::{Mode, Network, NnError, Tensor};

/// Largest trainable parameter count a check will enumerate.
pub const MAX_CHECKED_PARAMS: usize = 100_000;

/// Gradients smaller than this are compared absolutely, so values that are
/// zero up to rounding do not blow up the ratio.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct BlockError {
    pub name: String,
    pub len: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares backpropagated gradients of the mean cross-entropy with central
/// differences, block by block. Runs in [`Mode::Check`], so dropout is off
/// and batchnorm statistics are not updated. Parameters are left unchanged.
pub fn gradient_check(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport, NnError> {
    let count = net.param_count();
    if count >= MAX_CHECKED_PARAMS {
        return Err(NnError::TooManyParams(count));
    }
    net.loss_and_grad(x, labels, Mode::Check)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let meta: Vec<(String, bool, usize)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.trainable, p.value.len()))
        .collect();

    let mut blocks = Vec::new();
    for (bi, (name, trainable, len)) in meta.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let original = net.params()[bi].value[i];
            net.params_mut()[bi].value[i] = original + epsilon;
            let plus = net.loss(x, labels, Mode::Check)?;
            net.params_mut()[bi].value[i] = original - epsilon;
            let minus = net.loss(x, labels, Mode::Check)?;
            net.params_mut()[bi].value[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NnError::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[bi][i], numeric));
        }
        blocks.push(BlockError {
            name,
            len,
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport { epsilon, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(spec: NetworkSpec, batch: usize, seed: u64) -> GradCheckReport {
        let mut shape = vec![batch];
        shape.extend(&spec.input_shape);
        let labels: Vec<usize> = (0..batch).map(|i| i % spec.classes).collect();
        let mut net = Network::new(spec, seed).unwrap();
        let x = random_input(shape, seed + 100);
        gradient_check(&mut net, &x, &labels, 1e-5).unwrap()
    }

    #[test]
    fn toy_cnn_gradients_match() {
        let spec = NetworkSpec {
            input_shape: vec![1, 6, 7],
            classes: 3,
            layers: vec![
                LayerSpec::conv(3, 2),
                LayerSpec::Relu,
                LayerSpec::Maxpool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::dense(5),
                LayerSpec::Relu,
                LayerSpec::dense(3),
                LayerSpec::Softmax,
            ],
        };
        let report = check(spec, 3, 1);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn lstm_gradients_match_over_three_steps() {
        let spec = NetworkSpec {
            input_shape: vec![3, 4],
            classes: 2,
            layers: vec![
                LayerSpec::Lstm {
                    units: 3,
                    return_sequences: true,
                },
                LayerSpec::Lstm {
                    units: 3,
                    return_sequences: false,
                },
                LayerSpec::dense(2),
                LayerSpec::Softmax,
            ],
        };
        let report = check(spec, 2, 2);
        let lstm_blocks = report.blocks.iter().filter(|b| b.name.starts_with("0.lstm")).count();
        assert_eq!(lstm_blocks, 12);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn residual_gradients_match() {
        let spec = NetworkSpec {
            input_shape: vec![1, 6, 6],
            classes: 2,
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::ResidualBlock { filters: 2, stride: 1 },
                LayerSpec::ResidualBlock { filters: 3, stride: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::dense(2),
                LayerSpec::Softmax,
            ],
        };
        let report = check(spec, 4, 3);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn unused_block_reports_zero() {
        // Dense weights that multiply an all-zero input get no gradient.
        let spec = NetworkSpec {
            input_shape: vec![2],
            classes: 2,
            layers: vec![LayerSpec::dense(2), LayerSpec::Softmax],
        };
        let mut net = Network::new(spec, 0).unwrap();
        let report = gradient_check(&mut net, &Tensor::zeros(vec![2, 2]), &[0, 1], 1e-5).unwrap();
        assert_eq!(report.blocks[0].max_relative_error, 0.0);
    }

    #[test]
    fn parameters_survive_the_check() {
        let spec = NetworkSpec {
            input_shape: vec![3],
            classes: 2,
            layers: vec![LayerSpec::dense(2), LayerSpec::Softmax],
        };
        let mut net = Network::new(spec, 4).unwrap();
        let before = net.snapshot();
        gradient_check(&mut net, &random_input(vec![2, 3], 1), &[0, 1], 1e-5).unwrap();
        assert_eq!(net.snapshot(), before);
    }
}
