use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use log::{info, warn};

use coughpipe::audio_ingest::{load_manifest, Label, Manifest};
use coughpipe::balance::{SmoteConfig, SmoteTarget};
use coughpipe::evalcv::{nested_cv, CvConfig, FeatureSet, MetricsReport};
use coughpipe::features::FeatureConfig;
use coughpipe::models::{derive_seed, pretrain, Task, TrainConfig, TrainOutcome};
use coughpipe::nn::Checkpoint;
use coughpipe::synth::{write_corpus, SynthConfig};

use crate::args::{Cli, Command, CorpusKind, RunArgs, SynthArgs};
use crate::cache::{extract_into_cache, Failure};
use crate::config::RunConfig;

pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.cpck";
pub const PRETRAIN_HISTORY: &str = "pretrain_history.json";
pub const FOLDS_DIR: &str = "folds";

/// Seed streams split off the run seed.
const PRETRAIN_STREAM: u64 = 1;
const SMOTE_STREAM: u64 = 2;

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Extract(args) => with_config(&args, cmd_extract),
        Command::Pretrain(args) => with_config(&args, |cfg| cmd_pretrain(cfg).map(|_| ())),
        Command::Cv(args) => with_config(&args, |cfg| cmd_cv(cfg).map(|_| ())),
        Command::Report { report } => {
            print!("{}", cmd_report(&report)?);
            Ok(())
        }
        Command::Synth(args) => cmd_synth(&args).map(|_| ()),
    }
}

fn with_config(args: &RunArgs, body: impl FnOnce(&RunConfig) -> anyhow::Result<()> + Send) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    pool.install(|| body(&cfg))
}

fn failure_error(failures: &[Failure]) -> anyhow::Error {
    let mut msg = format!("{} event(s) failed feature extraction:", failures.len());
    for f in failures {
        let _ = write!(msg, "\n  {}: {}", f.event_id, f.message);
    }
    anyhow::anyhow!(msg)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    path.as_deref().with_context(|| format!("{flag} is required"))
}

fn load(path: &Path) -> anyhow::Result<Manifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Extracts one manifest under several configs. Returns one feature set per
/// config over the events that succeeded under all of them, plus failures.
fn extract_sets(
    manifest: &Manifest,
    configs: &[FeatureConfig],
    cache_root: &Path,
) -> anyhow::Result<(Vec<FeatureSet>, Vec<Failure>)> {
    let mut failures: BTreeMap<String, String> = BTreeMap::new();
    let mut per_config = Vec::with_capacity(configs.len());
    for fc in configs {
        let summary = extract_into_cache(manifest, fc, cache_root)?;
        info!(
            "features {}: {} written, {} reused, {} failed ({})",
            fc.cache_key(),
            summary.written,
            summary.reused,
            summary.failures.len(),
            summary.dir.display()
        );
        for f in summary.failures {
            failures.entry(f.event_id).or_insert(f.message);
        }
        per_config.push((*fc, summary.features));
    }
    let sets = per_config
        .into_iter()
        .map(|(config, examples)| FeatureSet {
            config,
            examples: examples
                .into_iter()
                .filter(|fm| !failures.contains_key(&fm.event_id))
                .collect(),
        })
        .collect();
    let failures = failures
        .into_iter()
        .map(|(event_id, message)| Failure { event_id, message })
        .collect();
    Ok((sets, failures))
}

pub fn cmd_extract(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = cfg.cache_dir();
    let mut jobs: Vec<(&Path, Vec<FeatureConfig>)> = Vec::new();
    if let Some(path) = &cfg.manifest {
        jobs.push((path, cfg.features.configs()));
    }
    if let Some(path) = &cfg.pretrain_manifest {
        jobs.push((path, vec![cfg.pretraining.features.config()]));
    }
    ensure!(!jobs.is_empty(), "--manifest or --pretrain-manifest is required");
    let mut failures = Vec::new();
    for (path, configs) in jobs {
        let manifest = load(path)?;
        for fc in &configs {
            let summary = extract_into_cache(&manifest, fc, &root)?;
            println!(
                "{}: {} written, {} reused, {} failed",
                summary.dir.display(),
                summary.written,
                summary.reused,
                summary.failures.len()
            );
            failures.extend(summary.failures);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failure_error(&failures))
    }
}

/// Training settings of the pre-training run.
fn pretrain_train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: cfg.pretraining.max_epochs,
        patience: cfg.pretraining.patience,
        seed: derive_seed(seed, &[PRETRAIN_STREAM]),
        validation_fraction: cfg.pretraining.validation_fraction,
    }
}

/// Pre-trains on the sneeze/speech/noise manifest and writes the checkpoint
/// and its training history under the output directory.
pub fn cmd_pretrain(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let seed = cfg.seed()?;
    let manifest = load(required(&cfg.pretrain_manifest, "--pretrain-manifest")?)?;
    if let Some(e) = manifest.entries.iter().find(|e| e.label.is_cough()) {
        bail!(
            "pre-training data must not contain coughs: event {} is labelled {}",
            e.event_id,
            e.label
        );
    }
    let features = cfg.pretraining.features.config();
    let (mut sets, failures) = extract_sets(&manifest, &[features], &cfg.cache_dir())?;
    let examples = sets.remove(0).examples;

    let oversample = SmoteConfig {
        k_neighbors: cfg.pretraining.smote_neighbors,
        target: SmoteTarget::RaiseToMajority(vec![Label::Sneeze]),
        seed: derive_seed(seed, &[PRETRAIN_STREAM, SMOTE_STREAM]),
    };
    let outcome = pretrain(
        cfg.arch,
        &cfg.pretraining.shape,
        &examples,
        &pretrain_train_config(cfg, seed),
        &cfg.pretraining.classifier,
        Some(&oversample),
    )?;
    let checkpoint = pretrain_checkpoint(&outcome, cfg, &features);

    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join(PRETRAIN_CHECKPOINT);
    checkpoint.save(&path)?;
    std::fs::write(cfg.out.join(PRETRAIN_HISTORY), serde_json::to_vec_pretty(&outcome.history)?)?;
    println!(
        "pre-trained {} for {} epochs (best epoch {}, validation F1 {:.4}): {}",
        cfg.arch,
        outcome.epochs_run(),
        outcome.best_epoch,
        outcome.best_val_f1,
        path.display()
    );
    if failures.is_empty() {
        Ok(checkpoint)
    } else {
        Err(failure_error(&failures))
    }
}

fn pretrain_checkpoint(outcome: &TrainOutcome, cfg: &RunConfig, features: &FeatureConfig) -> Checkpoint {
    let mut ck = outcome.checkpoint();
    ck.metadata.insert("architecture".into(), serde_json::json!(cfg.arch));
    ck.metadata.insert("features".into(), serde_json::json!(features));
    ck
}

fn checkpoint_features(ck: &Checkpoint) -> anyhow::Result<FeatureConfig> {
    let value = ck
        .metadata
        .get("features")
        .context("pre-trained checkpoint does not record its feature config")?;
    Ok(serde_json::from_value(value.clone())?)
}

pub fn check_task_labels(manifest: &Manifest, task: Task) -> anyhow::Result<()> {
    let present: BTreeSet<Label> = manifest.entries.iter().map(|e| e.label).collect();
    if let Some(stray) = present.iter().find(|l| !task.labels().contains(l)) {
        bail!("label {stray} is not part of the {task} task");
    }
    let missing: Vec<String> = task
        .labels()
        .iter()
        .filter(|l| !present.contains(l))
        .map(ToString::to_string)
        .collect();
    ensure!(missing.is_empty(), "{task} needs every one of its labels; missing {}", missing.join(", "));
    Ok(())
}

/// Nested cross-validation. Writes the report, the ROC points and one
/// checkpoint per outer fold, and returns the report.
pub fn cmd_cv(cfg: &RunConfig) -> anyhow::Result<MetricsReport> {
    let seed = cfg.seed()?;
    ensure!(cfg.task != Task::Pretrain, "cv runs a cough task, not {}", Task::Pretrain);
    let manifest = load(required(&cfg.manifest, "--manifest")?)?;
    check_task_labels(&manifest, cfg.task)?;

    let pretrained = if cfg.transfer {
        Some(match &cfg.pretrained {
            Some(path) => Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => cmd_pretrain(cfg)?,
        })
    } else {
        None
    };
    // A pre-trained network fixes the input shape, so its feature config is
    // the only one searched.
    let configs = match &pretrained {
        Some(ck) => vec![checkpoint_features(ck)?],
        None => cfg.features.configs(),
    };
    let (sets, failures) = extract_sets(&manifest, &configs, &cfg.cache_dir())?;
    if !failures.is_empty() {
        warn!("{} event(s) left out after failed extraction", failures.len());
    }

    let mut cv = CvConfig::new(cfg.task, cfg.arch, cfg.classifiers.configs(cfg.arch), seed);
    cv.resnet_depth = cfg.resnet_depth;
    cv.train = cfg.train_config();
    cv.smote_neighbors = cfg.smote_neighbors;
    cv.pretrained = pretrained;
    let outcome = nested_cv(&sets, &cv)?;

    let folds_dir = cfg.out.join(FOLDS_DIR);
    std::fs::create_dir_all(&folds_dir).with_context(|| format!("creating {}", folds_dir.display()))?;
    std::fs::write(cfg.out.join(REPORT_FILE), report_json(&outcome.report)?)?;
    std::fs::write(cfg.out.join(ROC_FILE), outcome.report.roc_csv())?;
    for (k, ck) in outcome.checkpoints.iter().enumerate() {
        ck.save(&folds_dir.join(format!("fold{k}.cpck")))?;
    }
    print!("{}", summary(&outcome.report));
    if failures.is_empty() {
        Ok(outcome.report)
    } else {
        Err(failure_error(&failures))
    }
}

pub fn report_json(report: &MetricsReport) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Human-readable summary. Every number is a report field printed with four
/// decimals.
pub fn summary(report: &MetricsReport) -> String {
    let head: Vec<String> = report.head.iter().map(ToString::to_string).collect();
    let mut out = String::new();
    let _ = writeln!(out, "task: {}", report.task);
    let _ = writeln!(out, "architecture: {}", report.architecture);
    let _ = writeln!(out, "head: ({})", head.join(", "));
    let _ = writeln!(out, "folds: {}", report.folds.len());
    let _ = writeln!(out, "mean F1: {:.4}", report.mean_f1);
    let _ = writeln!(out, "sigma F1: {:.4}", report.sigma_f1);
    match report.auc {
        Some(auc) => {
            let _ = writeln!(out, "AUC: {auc:.4}");
        }
        None => {
            let _ = writeln!(out, "accuracy: {:.4}", report.mean_accuracy);
        }
    }
    let _ = writeln!(
        out,
        "sensitivity at 0.70 specificity: {}",
        fmt4(report.sensitivity_at_specificity_070)
    );
    let _ = writeln!(
        out,
        "sensitivity at 0.80 specificity: {}",
        fmt4(report.sensitivity_at_specificity_080)
    );
    let verdict = match report.triage_pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "n/a",
    };
    let _ = writeln!(out, "WHO triage: {verdict}");
    out
}

pub fn cmd_report(path: &Path) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: MetricsReport =
        serde_json::from_str(&text).with_context(|| format!("{} is not a valid report", path.display()))?;
    Ok(summary(&report))
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<Manifest> {
    ensure!(args.patients >= 1 && args.events >= 1, "patients and events must be positive");
    let cfg = SynthConfig {
        sample_rate_hz: args.sample_rate,
        events_per_patient: args.events,
        seed: args.seed,
        ..Default::default()
    };
    let (plan, name): (Vec<(Label, usize)>, &str) = match args.kind {
        CorpusKind::Cough => {
            ensure!(args.task != Task::Pretrain, "a cough corpus needs a cough task");
            (args.task.labels().iter().map(|&l| (l, args.patients)).collect(), "synthetic-cough")
        }
        CorpusKind::Pretrain => (
            vec![
                (Label::Sneeze, (args.patients / 2).max(1)),
                (Label::Speech, args.patients),
                (Label::Noise, args.patients),
            ],
            "synthetic-pretrain",
        ),
    };
    let manifest = write_corpus(&args.out, &plan, name, &cfg)?;
    println!("{} events written to {}", manifest.entries.len(), args.out.display());
    Ok(manifest)
}
