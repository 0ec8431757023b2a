use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coughpipe::audio_ingest::{write_manifest, Label, Manifest, ManifestEntry};
use coughpipe::evalcv::MetricsReport;
use coughpipe::features::FeatureConfig;
use coughpipe::nn::Checkpoint;
use coughpipe::synth::{write_corpus, SynthConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coughpipe"))
        .args(args)
        .env_remove("COUGHPIPE_CACHE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "coughpipe {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, plan: &[(Label, usize)], seed: u64) -> PathBuf {
    let cfg = SynthConfig {
        events_per_patient: 2,
        seed,
        ..Default::default()
    };
    write_corpus(dir, plan, "test", &cfg).unwrap();
    dir.join("manifest.csv")
}

fn cpfm_files(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "cpfm"))
        .count()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        r#"{
  "features": [{"n_mfcc": 13, "frame_len": 512, "n_frames": 70}],
  "classifiers": [{"learning_rate": 0.01, "conv_filters": 24}],
  "resnet_depth": 1,
  "max_epochs": 2,
  "patience": 2,
  "pretraining": {
    "features": {"n_mfcc": 13, "frame_len": 512, "n_frames": 70},
    "shape": {"conv_filters": [4], "resnet_depth": 1, "dense_units": [16, 8]},
    "classifier": {"learning_rate": 0.01, "batch_size": 16},
    "max_epochs": 2,
    "patience": 2
  }
}"#,
    )
    .unwrap();
    path
}

#[test]
fn extract_caches_once_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("c"), &[(Label::Tb, 3), (Label::Covid19, 2)], 1);
    let cache = dir.path().join("cache");
    let config = dir.path().join("m13.json");
    std::fs::write(&config, r#"{"features": [{"n_mfcc": 13, "frame_len": 512, "n_frames": 70}]}"#).unwrap();
    let args = ["extract", "--manifest", s(&manifest), "--cache", s(&cache), "--config", s(&config)];

    let first = ok(&args);
    assert!(first.contains("10 written, 0 reused"), "{first}");
    let key_dir = cache.join(FeatureConfig::new(13, 512, 70).cache_key());
    assert_eq!(cpfm_files(&key_dir), 10);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(key_dir.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["events"].as_object().unwrap().len(), 10);

    let again = ok(&args);
    assert!(again.contains("0 written, 10 reused"), "{again}");

    std::fs::write(&config, r#"{"features": [{"n_mfcc": 26, "frame_len": 512, "n_frames": 70}]}"#).unwrap();
    let changed = ok(&args);
    assert!(changed.contains("10 written, 0 reused"), "{changed}");
    assert_eq!(cpfm_files(&cache.join(FeatureConfig::new(26, 512, 70).cache_key())), 10);
}

#[test]
fn cache_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("c"), &[(Label::Tb, 1)], 2);
    let cache = dir.path().join("env-cache");
    let out = Command::new(env!("CARGO_BIN_EXE_coughpipe"))
        .args(["extract", "--manifest", s(&manifest), "--out", s(&dir.path().join("out"))])
        .env("COUGHPIPE_CACHE", &cache)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(cache.exists());
    assert!(!dir.path().join("out/cache").exists());
}

#[test]
fn unreadable_audio_is_listed_and_the_rest_extracted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = corpus(&dir.path().join("c"), &[(Label::Tb, 2)], 3);
    let mut manifest = coughpipe::audio_ingest::load_manifest(&manifest_path).unwrap();
    manifest.entries.push(ManifestEntry {
        audio_path: PathBuf::from("audio/missing.wav"),
        event_id: "missing-e0".into(),
        patient_id: "missing".into(),
        label: Label::Tb,
        dataset_name: "test".into(),
    });
    write_manifest(&manifest_path, &Manifest { ..manifest }).unwrap();
    let cache = dir.path().join("cache");
    let out = run(&["extract", "--manifest", s(&manifest_path), "--cache", s(&cache)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing-e0"), "{stderr}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 written"));
}

#[test]
fn pretrain_refuses_coughs_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("c"), &[(Label::Sneeze, 2), (Label::Tb, 1)], 4);
    let out_dir = dir.path().join("out");
    let out = run(&["pretrain", "--pretrain-manifest", s(&manifest), "--seed", "1", "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tb"));
    assert!(!out_dir.exists(), "nothing should be written");
}

#[test]
fn pretrain_is_deterministic_with_a_three_way_head() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(
        &dir.path().join("p"),
        &[(Label::Sneeze, 3), (Label::Speech, 5), (Label::Noise, 5)],
        5,
    );
    let config = small_config(dir.path());
    let mut bytes = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        ok(&[
            "pretrain",
            "--pretrain-manifest",
            s(&manifest),
            "--config",
            s(&config),
            "--seed",
            "9",
            "--out",
            s(&out),
        ]);
        bytes.push(std::fs::read(out.join("pretrain.cpck")).unwrap());
        assert!(out.join("pretrain_history.json").exists());
    }
    assert_eq!(bytes[0], bytes[1]);
    let ck = Checkpoint::from_bytes(&bytes[0]).unwrap();
    assert_eq!(ck.spec.classes, 3);
    assert!(ck.metadata.contains_key("features"));
}

#[test]
fn cv_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("c"), &[(Label::Tb, 1), (Label::Covid19, 1)], 6);
    let out = run(&["cv", "--manifest", s(&manifest), "--out", s(&dir.path().join("out"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn cv_rejects_labels_outside_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("c"), &[(Label::Tb, 1), (Label::Healthy, 1)], 7);
    let out = run(&["cv", "--manifest", s(&manifest), "--task", "two_class", "--seed", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("healthy"));
}

#[test]
fn transfer_cv_reports_the_swapped_head() {
    let dir = tempfile::tempdir().unwrap();
    let pre = corpus(
        &dir.path().join("p"),
        &[(Label::Sneeze, 3), (Label::Speech, 5), (Label::Noise, 5)],
        8,
    );
    let cough = corpus(&dir.path().join("c"), &[(Label::Tb, 5), (Label::Covid19, 5)], 9);
    let config = small_config(dir.path());
    let out = dir.path().join("out");
    let summary = ok(&[
        "cv",
        "--manifest",
        s(&cough),
        "--pretrain-manifest",
        s(&pre),
        "--task",
        "two_class",
        "--arch",
        "resnet_mini",
        "--transfer",
        "--config",
        s(&config),
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.architecture, "resnet_mini+transfer");
    assert_eq!(report.head, vec![16, 2]);
    assert_eq!(report.folds.len(), 5);
    assert!(report.auc.is_some());
    assert!(out.join("pretrain.cpck").exists());
    assert!(out.join("roc.csv").exists());
    assert_eq!(std::fs::read_dir(out.join("folds")).unwrap().count(), 5);
    assert!(summary.contains("WHO triage: "));

    // The report command prints the same numbers.
    let printed = ok(&["report", s(&out.join("report.json"))]);
    assert!(summary.starts_with("pre-trained resnet_mini"), "{summary}");
    assert!(summary.ends_with(&printed), "{summary}");
    assert!(printed.contains(&format!("sigma F1: {:.4}", report.sigma_f1)));
    assert!(printed.contains(&format!("AUC: {:.4}", report.auc.unwrap())));
}

#[test]
fn report_rejects_malformed_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    std::fs::write(&path, "{\"mean_f1\": 1}").unwrap();
    assert!(!run(&["report", s(&path)]).status.success());
}

#[test]
fn synth_writes_an_imbalanced_pretraining_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    ok(&["synth", "--out", s(&out), "--kind", "pretrain", "--patients", "4", "--events", "1"]);
    let manifest = coughpipe::audio_ingest::load_manifest(&out.join("manifest.csv")).unwrap();
    let count = |l: Label| manifest.entries.iter().filter(|e| e.label == l).count();
    assert_eq!((count(Label::Sneeze), count(Label::Speech), count(Label::Noise)), (2, 4, 4));
}
