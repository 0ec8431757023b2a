use std::collections::BTreeMap;

use coughpipe::audio_ingest::{load_manifest, load_recording, preprocess, Label};
use coughpipe::balance::{class_counts, smote, SmoteConfig, Tagged};
use coughpipe::evalcv::{make_folds, patient_labels, split_by_patients};
use coughpipe::features::{extract_features, read_feature_file, write_feature_file, FeatureConfig, FeatureMatrix};
use coughpipe::models::{build_cnn, input_shape, train, Classifier, ClassifierConfig, Task, TrainConfig};
use coughpipe::nn::{Checkpoint, Network};
use coughpipe::synth::{write_corpus, SynthConfig};

fn corpus_features(dir: &std::path::Path, cfg: &FeatureConfig) -> Vec<FeatureMatrix> {
    let synth = SynthConfig {
        seed: 11,
        ..Default::default()
    };
    write_corpus(dir, &[(Label::Tb, 8), (Label::Covid19, 5)], "it", &synth).unwrap();
    let manifest = load_manifest(&dir.join("manifest.csv")).unwrap();
    manifest
        .entries
        .iter()
        .map(|e| {
            let clean = preprocess(&load_recording(&manifest, e).unwrap()).unwrap();
            extract_features(&clean, cfg).unwrap()
        })
        .collect()
}

#[test]
fn audio_to_trained_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FeatureConfig::new(13, 512, 70);
    let examples = corpus_features(dir.path(), &cfg);
    assert_eq!(examples.len(), 26);
    for fm in &examples {
        assert_eq!((fm.rows, fm.cols), (3 * 13 + 2, 70));
        assert!(fm.values.iter().all(|v| v.is_finite()));
    }

    let path = dir.path().join("first.cpfm");
    write_feature_file(&path, &examples[0]).unwrap();
    assert_eq!(read_feature_file(&path).unwrap(), examples[0]);

    let plan = make_folds(&patient_labels(&examples), 5, 4, 3).unwrap();
    let (train_set, test_set) = split_by_patients(&examples, &plan.outer[0].test_patients);
    assert!(!test_set.is_empty());

    let tagged: Vec<Tagged> = train_set.into_iter().map(Tagged::train).collect();
    let balanced = smote(&tagged, &SmoteConfig::equalize(5)).unwrap();
    let counts = class_counts(&balanced);
    assert_eq!(counts[&Label::Tb], counts[&Label::Covid19]);
    assert!(balanced.iter().any(|fm| fm.synthetic));

    let hyper = ClassifierConfig {
        learning_rate: 1e-2,
        ..Default::default()
    };
    let spec = build_cnn(&hyper, &input_shape(&cfg), 2).unwrap();
    let tcfg = TrainConfig {
        max_epochs: 15,
        patience: 5,
        seed: 4,
        validation_fraction: 0.2,
    };
    let mut out = train(Network::new(spec, 4).unwrap(), &balanced, &tcfg, &hyper, Task::TwoClass).unwrap();
    assert!(out.best_val_f1 > 0.0);
    let f1 = out.classifier.f1(&test_set).unwrap();
    assert!(f1 >= 0.9, "held-out F1 {f1}");

    // A checkpoint round trip predicts the same probabilities.
    let bytes = out.classifier.to_checkpoint(BTreeMap::new()).to_bytes();
    let mut restored = Classifier::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(
        restored.predict_probs(&test_set).unwrap(),
        out.classifier.predict_probs(&test_set).unwrap()
    );
}

#[test]
fn extraction_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = FeatureConfig::new(26, 1024, 40);
    assert_eq!(corpus_features(a.path(), &cfg), corpus_features(b.path(), &cfg));
}
