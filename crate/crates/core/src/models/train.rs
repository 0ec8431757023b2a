use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, ModelError, Task};
use crate::audio_ingest::Label;
use crate::evalcv::{classify_event, decision_rule, f1_mode, f1_score};
use crate::features::{FeatureConfig, FeatureMatrix};
use crate::nn::{Adam, Checkpoint, Mode, Network, NnError, Tensor};

const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a validation F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of training patients held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            patience: 10,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patience == 0 {
            return Err(ModelError::Config("patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(ModelError::Config("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with a path of indices (splitmix64 finalizer), so
/// every fold and candidate gets its own stream.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Network input shape for a feature configuration.
pub fn input_shape(cfg: &FeatureConfig) -> Vec<usize> {
    vec![1, cfg.rows(), cfg.n_frames]
}

/// Per-row z-scoring fitted on training matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(examples: &[FeatureMatrix]) -> Self {
        let rows = examples[0].rows;
        let mut mean = vec![0.0; rows];
        let mut sq = vec![0.0; rows];
        let mut n = 0.0;
        for fm in examples {
            n += fm.cols as f64;
            for r in 0..rows {
                for &v in fm.row(r) {
                    mean[r] += v;
                    sq[r] += v * v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-20 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, fm: &FeatureMatrix) -> Vec<f64> {
        let mut out = Vec::with_capacity(fm.values.len());
        for r in 0..fm.rows {
            out.extend(fm.row(r).iter().map(|v| (v - self.mean[r]) / self.std[r]));
        }
        out
    }
}

/// A network together with its input scaling and label mapping.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub net: Network,
    pub standardizer: Standardizer,
    pub task: Task,
}

impl Classifier {
    /// Class-probability row per example, in inference mode.
    pub fn predict_probs(&mut self, examples: &[FeatureMatrix]) -> Result<Vec<Vec<f64>>, ModelError> {
        let item_shape = self.net.spec().input_shape.clone();
        let classes = self.net.classes();
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(INFERENCE_CHUNK) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|fm| self.standardizer.apply(fm)).collect();
            let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
            let probs = self.net.predict(&Tensor::stack(&refs, &item_shape))?;
            out.extend(probs.data().chunks(classes).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Validation-style F1 of the decision rule on labelled examples.
    pub fn f1(&mut self, examples: &[FeatureMatrix]) -> Result<f64, ModelError> {
        let truths = class_indices(examples, self.task)?;
        let probs = self.predict_probs(examples)?;
        let preds: Vec<usize> = probs
            .iter()
            .map(|p| classify_event(p, decision_rule(self.task)))
            .collect();
        Ok(f1_score(&preds, &truths, f1_mode(self.task))?)
    }

    pub fn to_checkpoint(&self, mut metadata: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        metadata.insert("task".into(), serde_json::json!(self.task));
        metadata.insert(
            "standardizer".into(),
            serde_json::to_value(&self.standardizer).expect("standardizer serializes"),
        );
        Checkpoint::from_network(&self.net, metadata)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let field = |name: &str| {
            ck.metadata
                .get(name)
                .cloned()
                .ok_or_else(|| NnError::Checkpoint(format!("metadata lacks {name}")))
        };
        let task: Task = serde_json::from_value(field("task")?)
            .map_err(|e| NnError::Checkpoint(format!("task: {e}")))?;
        let standardizer: Standardizer = serde_json::from_value(field("standardizer")?)
            .map_err(|e| NnError::Checkpoint(format!("standardizer: {e}")))?;
        Ok(Classifier {
            net: ck.to_network()?,
            standardizer,
            task,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub classifier: Classifier,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("best_epoch".into(), serde_json::json!(self.best_epoch));
        meta.insert("epochs_run".into(), serde_json::json!(self.epochs_run()));
        self.classifier.to_checkpoint(meta)
    }

    /// First epoch whose validation F1 reached `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.history.iter().find(|r| r.val_f1 >= target).map(|r| r.epoch)
    }
}

pub(crate) fn class_indices(examples: &[FeatureMatrix], task: Task) -> Result<Vec<usize>, ModelError> {
    examples.iter().map(|fm| task.class_index(fm.label)).collect()
}

/// Splits examples into training and validation indices by patient.
///
/// Patients are grouped by the label of their first event and, per label,
/// a seeded `fraction` of them (at least one when a label has two or more
/// patients) go to validation. Synthetic examples always stay in training.
pub fn validation_split(examples: &[FeatureMatrix], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut patient_label: BTreeMap<&str, Label> = BTreeMap::new();
    for fm in examples.iter().filter(|fm| !fm.synthetic) {
        patient_label.entry(fm.patient_id.as_str()).or_insert(fm.label);
    }
    let mut by_label: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    for (p, l) in patient_label {
        by_label.entry(l).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held_out: BTreeSet<&str> = BTreeSet::new();
    for patients in by_label.values_mut() {
        patients.shuffle(&mut rng);
        if fraction > 0.0 && patients.len() >= 2 {
            let n = ((fraction * patients.len() as f64).round() as usize).clamp(1, patients.len() - 1);
            held_out.extend(&patients[..n]);
        }
    }
    (0..examples.len()).partition(|&i| {
        let fm = &examples[i];
        fm.synthetic || !held_out.contains(fm.patient_id.as_str())
    })
}

/// Trains with a patient-disjoint validation split taken from `examples`.
pub fn train(
    net: Network,
    examples: &[FeatureMatrix],
    cfg: &TrainConfig,
    hyper: &ClassifierConfig,
    task: Task,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let (train_idx, val_idx) = validation_split(examples, cfg.validation_fraction, derive_seed(cfg.seed, &[0]));
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    train_with_validation(net, &pick(&train_idx), &pick(&val_idx), cfg, hyper, task)
}

/// Adam on shuffled minibatches with early stopping on validation F1.
///
/// An epoch counts as an improvement only when its F1 is strictly higher
/// than the best so far; training stops once `patience` epochs pass without
/// one, and the best epoch's parameters are returned.
pub fn train_with_validation(
    net: Network,
    train: &[FeatureMatrix],
    val: &[FeatureMatrix],
    cfg: &TrainConfig,
    hyper: &ClassifierConfig,
    task: Task,
) -> Result<TrainOutcome, ModelError> {
    fit_network(net, None, train, val, cfg, hyper, task)
}

/// Like [`train_with_validation`], but inputs are scaled by `standardizer`
/// instead of statistics of `train`. Used when the network was trained
/// earlier on differently distributed data.
pub fn train_with_scaling(
    net: Network,
    standardizer: Standardizer,
    train: &[FeatureMatrix],
    val: &[FeatureMatrix],
    cfg: &TrainConfig,
    hyper: &ClassifierConfig,
    task: Task,
) -> Result<TrainOutcome, ModelError> {
    if standardizer.mean.len() != net.spec().input_shape.get(1).copied().unwrap_or(0) {
        return Err(ModelError::Config("standardizer rows do not match the network input".into()));
    }
    fit_network(net, Some(standardizer), train, val, cfg, hyper, task)
}

fn fit_network(
    mut net: Network,
    scaling: Option<Standardizer>,
    train: &[FeatureMatrix],
    val: &[FeatureMatrix],
    cfg: &TrainConfig,
    hyper: &ClassifierConfig,
    task: Task,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    hyper.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTraining);
    }
    if val.is_empty() {
        return Err(ModelError::EmptyValidation);
    }
    if net.classes() != task.classes() {
        return Err(ModelError::Config(format!(
            "network has {} outputs, {task} needs {}",
            net.classes(),
            task.classes()
        )));
    }
    let labels = class_indices(train, task)?;
    class_indices(val, task)?;
    let standardizer = scaling.unwrap_or_else(|| Standardizer::fit(train));
    let inputs: Vec<Vec<f64>> = train.iter().map(|fm| standardizer.apply(fm)).collect();
    let item_shape = net.spec().input_shape.clone();

    net.reseed_dropout(derive_seed(cfg.seed, &[1]));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let mut adam = Adam::new(hyper.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut classifier = Classifier {
        net,
        standardizer,
        task,
    };
    let mut best_snapshot = classifier.net.snapshot();
    let mut best_epoch = 0;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let refs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = Tensor::stack(&refs, &item_shape);
            let loss = classifier
                .net
                .loss_and_grad(&x, &y, Mode::Train)
                .map_err(|e| match e {
                    NnError::NonFinite(message) => ModelError::NonFiniteLoss { epoch, message },
                    other => other.into(),
                })?;
            adam.step(classifier.net.params_mut());
            loss_sum += loss * batch.len() as f64;
        }
        let loss = loss_sum / train.len() as f64;
        let val_f1 = classifier.f1(val)?;
        log::debug!("epoch {epoch}: loss {loss:.5} val_f1 {val_f1:.4}");
        history.push(EpochRecord { epoch, loss, val_f1 });
        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best_epoch = epoch;
            best_snapshot = classifier.net.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    classifier.net.restore(&best_snapshot);
    Ok(TrainOutcome {
        classifier,
        history,
        best_epoch,
        best_val_f1: best_f1,
    })
}
