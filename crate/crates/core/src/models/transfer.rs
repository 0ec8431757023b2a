use super::build::{build_pretrain_network, PretrainShape};
use super::train::{
    derive_seed, input_shape, train_with_scaling, train_with_validation, validation_split, Standardizer, TrainConfig,
    TrainOutcome,
};
use super::{Architecture, ClassifierConfig, ModelError, Task};
use crate::balance::{smote, SmoteConfig, Tagged};
use crate::features::FeatureMatrix;
use crate::nn::{blocks_checksum, Checkpoint, LayerSpec, Network, NetworkSpec, NnError};

/// Width of the first dense layer of a swapped-in head.
pub const HEAD_UNITS: usize = 16;

/// Trains a three-class sneeze/speech/noise network. Cough labels are
/// refused before anything is built. With `oversample`, SMOTE runs on the
/// training share after the validation patients are held out.
pub fn pretrain(
    arch: Architecture,
    shape: &PretrainShape,
    examples: &[FeatureMatrix],
    cfg: &TrainConfig,
    hyper: &ClassifierConfig,
    oversample: Option<&SmoteConfig>,
) -> Result<TrainOutcome, ModelError> {
    if let Some(fm) = examples.iter().find(|fm| fm.label.is_cough()) {
        return Err(ModelError::CoughInPretraining(fm.label));
    }
    cfg.validate()?;
    let first = examples.first().ok_or(ModelError::EmptyTraining)?;
    let spec = build_pretrain_network(arch, shape, &input_shape(&first.config))?;
    let net = Network::new(spec, cfg.seed)?;
    let (train_idx, val_idx) = validation_split(examples, cfg.validation_fraction, derive_seed(cfg.seed, &[0]));
    let val: Vec<FeatureMatrix> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let train = match oversample {
        Some(smote_cfg) => {
            let tagged: Vec<Tagged> = train_idx.iter().map(|&i| Tagged::train(examples[i].clone())).collect();
            smote(&tagged, smote_cfg)?
        }
        None => train_idx.iter().map(|&i| examples[i].clone()).collect(),
    };
    train_with_validation(net, &train, &val, cfg, hyper, Task::Pretrain)
}

/// Number of leading layers kept by [`head_swap`]: everything before the
/// second-to-last dense layer.
pub fn backbone_len(spec: &NetworkSpec) -> Option<usize> {
    let dense = spec.dense_layers();
    (dense.len() >= 2).then(|| dense[dense.len() - 2])
}

/// Checksum of the parameters in the first `layers` layers.
pub fn backbone_checksum(net: &Network, layers: usize) -> String {
    let params: Vec<_> = (0..layers).flat_map(|i| net.layer_params(i)).collect();
    blocks_checksum(params.iter().map(|p| p.value.as_slice()))
}

/// Drops the last two dense layers of a pre-trained network and appends a
/// fresh `dense(16) -> relu -> dense(classes) -> softmax` head initialized
/// from `seed`. Retained parameters are copied bit for bit.
pub fn head_swap(pretrained: &Checkpoint, classes: usize, seed: u64) -> Result<Network, ModelError> {
    if !(2..=3).contains(&classes) {
        return Err(ModelError::ClassCount(classes));
    }
    let keep = backbone_len(&pretrained.spec).ok_or(ModelError::MissingHead)?;
    if pretrained.spec.classes != 3 {
        return Err(ModelError::MissingHead);
    }
    let mut layers = pretrained.spec.layers[..keep].to_vec();
    layers.extend([
        LayerSpec::dense(HEAD_UNITS),
        LayerSpec::Relu,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ]);
    let spec = NetworkSpec {
        input_shape: pretrained.spec.input_shape.clone(),
        classes,
        layers,
    };
    let mut net = Network::new(spec, seed)?;
    let source = pretrained.to_network()?;
    for i in 0..keep {
        for (dst, src) in net.layer_params_mut(i).into_iter().zip(source.layer_params(i)) {
            debug_assert_eq!(dst.name, src.name);
            dst.value.copy_from_slice(&src.value);
        }
    }
    Ok(net)
}

/// Input scaling stored with a pre-trained checkpoint.
pub fn pretrained_scaling(pretrained: &Checkpoint) -> Result<Standardizer, ModelError> {
    let value = pretrained
        .metadata
        .get("standardizer")
        .ok_or_else(|| NnError::Checkpoint("metadata lacks standardizer".into()))?;
    Ok(serde_json::from_value(value.clone()).map_err(|e| NnError::Checkpoint(format!("standardizer: {e}")))?)
}

/// Trains a swapped network on cough data with a patient-disjoint
/// validation split. Inputs keep the pre-training scaling, so the backbone
/// sees data on the scale it was trained on; every layer stays trainable.
pub fn finetune(
    net: Network,
    scaling: &Standardizer,
    examples: &[FeatureMatrix],
    cfg: &TrainConfig,
    hyper: &ClassifierConfig,
    task: Task,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let (train_idx, val_idx) = validation_split(examples, cfg.validation_fraction, derive_seed(cfg.seed, &[0]));
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    train_with_scaling(net, scaling.clone(), &pick(&train_idx), &pick(&val_idx), cfg, hyper, task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_ingest::Label;
    use crate::balance::SmoteTarget;
    use crate::models::train::tests::blobs;
    use crate::nn::Tensor;
    use std::collections::BTreeMap;

    fn shape() -> PretrainShape {
        PretrainShape {
            conv_filters: vec![4],
            lstm_units: vec![4, 3],
            resnet_depth: 1,
            dense_units: [12, 6],
            ..Default::default()
        }
    }

    fn hyper() -> ClassifierConfig {
        ClassifierConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            ..Default::default()
        }
    }

    fn pretrained(arch: Architecture) -> Checkpoint {
        let spec = build_pretrain_network(arch, &shape(), &[1, 5, 6]).unwrap();
        Checkpoint::from_network(&Network::new(spec, 4).unwrap(), BTreeMap::new())
    }

    #[test]
    fn cough_labels_are_refused() {
        let mut data = blobs(Task::Pretrain, 6, 3, 1);
        data[3].label = Label::Tb;
        let cfg = TrainConfig::default();
        assert!(matches!(
            pretrain(Architecture::Cnn, &shape(), &data, &cfg, &hyper(), None),
            Err(ModelError::CoughInPretraining(Label::Tb))
        ));
    }

    #[test]
    fn separable_pretraining_reaches_high_f1() {
        let data = blobs(Task::Pretrain, 30, 15, 2);
        let cfg = TrainConfig {
            max_epochs: 60,
            seed: 3,
            validation_fraction: 0.2,
            ..Default::default()
        };
        let out = pretrain(Architecture::Cnn, &shape(), &data, &cfg, &hyper(), None).unwrap();
        assert!(out.best_val_f1 >= 0.95, "{:?}", out.history);
        assert_eq!(out.classifier.net.spec().dense_widths().last(), Some(&3));
    }

    #[test]
    fn oversampled_sneezes_train_alongside_the_rest() {
        let mut data = blobs(Task::Pretrain, 30, 15, 5);
        // Keep a third of the sneezes.
        data.retain(|fm| fm.label != Label::Sneeze || fm.event_id.ends_with(['0', '3', '6', '9']));
        let sneezes = data.iter().filter(|fm| fm.label == Label::Sneeze).count();
        assert!(sneezes < 15);
        let cfg = TrainConfig {
            max_epochs: 30,
            seed: 1,
            validation_fraction: 0.2,
            ..Default::default()
        };
        let smote_cfg = SmoteConfig {
            k_neighbors: 3,
            target: SmoteTarget::RaiseToMajority(vec![Label::Sneeze]),
            seed: 2,
        };
        let out = pretrain(Architecture::Cnn, &shape(), &data, &cfg, &hyper(), Some(&smote_cfg)).unwrap();
        assert!(out.best_val_f1 >= 0.9, "{:?}", out.history);
    }

    #[test]
    fn head_swap_keeps_backbone_bits() {
        for arch in [Architecture::Cnn, Architecture::Lstm, Architecture::ResnetMini] {
            let ck = pretrained(arch);
            let source = ck.to_network().unwrap();
            let keep = backbone_len(&ck.spec).unwrap();
            for classes in [2, 3] {
                let net = head_swap(&ck, classes, 8).unwrap();
                let widths = net.spec().dense_widths();
                assert_eq!(&widths[widths.len() - 2..], &[HEAD_UNITS, classes]);
                assert_eq!(net.spec().layers[..keep], ck.spec.layers[..keep]);
                assert_eq!(backbone_checksum(&net, keep), backbone_checksum(&source, keep));
            }
        }
    }

    #[test]
    fn head_swap_needs_a_two_layer_head() {
        let spec = NetworkSpec {
            input_shape: vec![4],
            classes: 3,
            layers: vec![LayerSpec::dense(3), LayerSpec::Softmax],
        };
        let ck = Checkpoint::from_network(&Network::new(spec, 0).unwrap(), BTreeMap::new());
        assert!(matches!(head_swap(&ck, 2, 0), Err(ModelError::MissingHead)));
    }

    #[test]
    fn zero_epoch_finetune_predicts_like_the_swapped_net() {
        let ck = pretrained(Architecture::Cnn);
        let mut swapped = head_swap(&ck, 2, 5).unwrap();
        let data = blobs(Task::TwoClass, 6, 3, 4);
        let cfg = TrainConfig {
            max_epochs: 0,
            validation_fraction: 0.4,
            ..Default::default()
        };
        let scaling = Standardizer {
            mean: vec![0.5; 5],
            std: vec![2.0; 5],
        };
        let mut out = finetune(swapped.clone(), &scaling, &data, &cfg, &hyper(), Task::TwoClass).unwrap();
        assert_eq!(out.classifier.standardizer, scaling);
        let probs = out.classifier.predict_probs(&data).unwrap();
        let inputs: Vec<Vec<f64>> = data.iter().map(|fm| scaling.apply(fm)).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let direct = swapped.predict(&Tensor::stack(&refs, &[1, 5, 6])).unwrap();
        let flat: Vec<f64> = probs.concat();
        assert_eq!(flat, direct.data());
    }
}
