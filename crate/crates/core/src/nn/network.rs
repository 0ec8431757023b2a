use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    BatchNorm, Conv2d, Dense, Dropout, Flatten, GlobalAvgPool, Layer, Lstm, MaxPool2x2, Mode, Param,
    Relu, ResidualBlock, Sequence, Softmax,
};
use super::{LayerSpec, NetworkSpec, NnError, Tensor};

/// Stream used for dropout masks, kept apart from initialization.
const DROPOUT_STREAM: u64 = 1;

/// Network built from a [`NetworkSpec`] together with its parameters.
///
/// Forward passes cache activations, so a network is used by one caller at a
/// time; clone it to run inference concurrently.
pub struct Network {
    spec: NetworkSpec,
    seed: u64,
    layers: Vec<Box<dyn Layer>>,
    dropout_rng: ChaCha8Rng,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl Clone for Network {
    fn clone(&self) -> Self {
        let mut net = Network::new(self.spec.clone(), self.seed).expect("spec already validated");
        for (dst, src) in net.params_mut().into_iter().zip(self.params()) {
            dst.value.copy_from_slice(&src.value);
        }
        net.dropout_rng = self.dropout_rng.clone();
        net
    }
}

fn build_layer(
    index: usize,
    spec: &LayerSpec,
    in_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Box<dyn Layer> {
    let prefix = format!("{index}.{}", spec.name());
    match *spec {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        } => Box::new(Conv2d::new(&prefix, in_shape, filters, kernel, stride, padding, rng)),
        LayerSpec::Maxpool2x2 => Box::new(MaxPool2x2::new()),
        LayerSpec::Dense { units } => Box::new(Dense::new(&prefix, in_shape[0], units, rng)),
        LayerSpec::Relu => Box::new(Relu::new()),
        LayerSpec::Softmax => Box::new(Softmax::new()),
        LayerSpec::Dropout { rate } => Box::new(Dropout::new(rate)),
        LayerSpec::Flatten => Box::new(Flatten::new()),
        LayerSpec::Sequence => Box::new(Sequence::new()),
        LayerSpec::Lstm {
            units,
            return_sequences,
        } => Box::new(Lstm::new(&prefix, in_shape[1], units, return_sequences, rng)),
        LayerSpec::ResidualBlock { filters, stride } => {
            Box::new(ResidualBlock::new(&prefix, in_shape, filters, stride, rng))
        }
        LayerSpec::Batchnorm => Box::new(BatchNorm::new(&prefix, in_shape[0])),
        LayerSpec::GlobalAvgPool => Box::new(GlobalAvgPool::new()),
    }
}

/// Mean cross-entropy of probability rows against class indices.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> f64 {
    let k = probs.shape()[1];
    let total: f64 = probs
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| -row[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

impl Network {
    /// Validates the spec and initializes parameters from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| build_layer(i, l, &shapes[i], &mut rng))
            .collect();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        Ok(Network {
            spec,
            seed,
            layers,
            dropout_rng,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Restarts the dropout mask sequence.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        self.dropout_rng.set_stream(DROPOUT_STREAM);
    }

    /// Every parameter block in spec order, including running statistics.
    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameter blocks owned by layer `index`.
    pub fn layer_params(&self, index: usize) -> Vec<&Param> {
        self.layers[index].params()
    }

    pub fn layer_params_mut(&mut self, index: usize) -> Vec<&mut Param> {
        self.layers[index].params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (p, v) in self.params_mut().into_iter().zip(snapshot) {
            p.value.copy_from_slice(v);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.shape().len() != self.spec.input_shape.len() + 1
            || x.shape()[1..] != self.spec.input_shape[..]
            || x.batch() == 0
        {
            return Err(NnError::Spec {
                layer: 0,
                message: format!(
                    "batch shape {:?} does not match input {:?}",
                    x.shape(),
                    self.spec.input_shape
                ),
            });
        }
        Ok(())
    }

    /// Class probabilities `[B, classes]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut act = x.clone();
        for layer in &mut self.layers {
            act = layer.forward(act, mode, &mut self.dropout_rng);
        }
        Ok(act)
    }

    /// Inference-mode forward pass.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        self.forward(x, Mode::Infer)
    }

    /// Runs forward and backward for mean cross-entropy, leaving fresh
    /// gradients in every parameter. Returns the loss.
    pub fn loss_and_grad(&mut self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<f64, NnError> {
        let classes = self.spec.classes;
        if labels.len() != x.batch() {
            return Err(NnError::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                x.batch()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Label { label, classes });
        }
        let probs = self.forward(x, mode)?;
        let loss = cross_entropy(&probs, labels);
        if !loss.is_finite() {
            return Err(NnError::NonFinite(format!("loss {loss}")));
        }
        self.zero_grad();
        // Softmax and cross-entropy combine to (p - y) / B on the logits.
        let batch = labels.len() as f64;
        let mut grad = probs;
        for (row, &y) in grad.data_mut().chunks_mut(classes).zip(labels) {
            row[y] -= 1.0;
            row.iter_mut().for_each(|g| *g /= batch);
        }
        let last = self.layers.len() - 1;
        for layer in self.layers[..last].iter_mut().rev() {
            grad = layer.backward(grad);
        }
        Ok(loss)
    }

    /// Mean cross-entropy without touching gradients.
    pub fn loss(&mut self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<f64, NnError> {
        let probs = self.forward(x, mode)?;
        Ok(cross_entropy(&probs, labels))
    }
}
