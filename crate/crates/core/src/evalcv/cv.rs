use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::{make_folds, patient_labels, split_by_patients, FoldPlan, INNER_FOLDS, OUTER_FOLDS};
use super::metrics::{
    accuracy, aggregate, auc, classify_event, decision_rule, f1_mode, f1_score, roc_curve,
    sensitivity_at_specificity, who_triage_check, RocPoint,
};
use super::EvalError;
use crate::audio_ingest::Label;
use crate::balance::{smote, SmoteConfig, Tagged};
use crate::features::{FeatureConfig, FeatureMatrix};
use crate::models::{
    build_network, derive_seed, head_swap, input_shape, pretrained_scaling, train_with_scaling, train_with_validation,
    validation_split, Architecture, ClassifierConfig, ModelError, Standardizer, Task, TrainConfig, TrainOutcome,
};
use crate::nn::{Checkpoint, Network};

/// Feature matrices of every event under one feature configuration.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub config: FeatureConfig,
    pub examples: Vec<FeatureMatrix>,
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub task: Task,
    pub arch: Architecture,
    /// Residual blocks when `arch` is the residual network.
    pub resnet_depth: usize,
    pub classifier_grid: Vec<ClassifierConfig>,
    /// Epoch budget, patience and validation share; its seed is unused, as
    /// every training run derives its own from `seed`.
    pub train: TrainConfig,
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub smote_neighbors: usize,
    pub seed: u64,
    /// Pre-trained checkpoint to start every fold from via a head swap.
    pub pretrained: Option<Checkpoint>,
}

impl CvConfig {
    pub fn new(task: Task, arch: Architecture, classifier_grid: Vec<ClassifierConfig>, seed: u64) -> Self {
        CvConfig {
            task,
            arch,
            resnet_depth: 2,
            classifier_grid,
            train: TrainConfig::default(),
            outer_folds: OUTER_FOLDS,
            inner_folds: INNER_FOLDS,
            smote_neighbors: 5,
            seed,
            pretrained: None,
        }
    }

    pub fn architecture_name(&self) -> String {
        match self.pretrained {
            Some(_) => format!("{}+transfer", self.arch),
            None => self.arch.to_string(),
        }
    }
}

/// Event-level scores. Networks here score a whole feature image at once,
/// so `per_frame_probs` holds a single row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub event_id: String,
    pub patient_id: String,
    pub true_label: Label,
    pub per_frame_probs: Vec<Vec<f64>>,
    pub aggregated: Vec<f64>,
}

impl EventScore {
    pub fn new(fm: &FeatureMatrix, per_frame_probs: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let aggregated = aggregate(&per_frame_probs)?;
        Ok(EventScore {
            event_id: fm.event_id.clone(),
            patient_id: fm.patient_id.clone(),
            true_label: fm.label,
            per_frame_probs,
            aggregated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub test_patients: usize,
    pub test_events: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub best_features: FeatureConfig,
    pub best_classifier: ClassifierConfig,
    /// Mean inner F1 of the selected pair; absent when the grid has one
    /// candidate and no inner search runs.
    pub inner_mean_f1: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub architecture: String,
    /// Widths of the last two dense layers.
    pub head: Vec<usize>,
    pub seed: u64,
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub folds: Vec<FoldRecord>,
    pub mean_f1: f64,
    /// Population standard deviation of the per-fold F1.
    pub sigma_f1: f64,
    pub mean_accuracy: f64,
    /// Binary tasks only: pooled over all outer test folds.
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub sensitivity_at_specificity_070: Option<f64>,
    pub sensitivity_at_specificity_080: Option<f64>,
    pub triage_pass: Option<bool>,
}

impl MetricsReport {
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.roc {
            out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        out
    }
}

/// Report plus the final model and event scores of every outer fold.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub plan: FoldPlan,
    pub checkpoints: Vec<Checkpoint>,
    pub scores: Vec<Vec<EventScore>>,
}

/// Population mean and standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Initial network of a training run, with the input scaling of the
/// pre-trained checkpoint when starting from one.
fn fresh_network(
    cfg: &CvConfig,
    fs: &FeatureConfig,
    hyper: &ClassifierConfig,
    seed: u64,
) -> Result<(Network, Option<Standardizer>), ModelError> {
    let shape = input_shape(fs);
    match &cfg.pretrained {
        Some(ck) => {
            if ck.spec.input_shape != shape {
                return Err(ModelError::Config(format!(
                    "pre-trained input {:?} does not match features {:?}",
                    ck.spec.input_shape, shape
                )));
            }
            Ok((head_swap(ck, cfg.task.classes(), seed)?, Some(pretrained_scaling(ck)?)))
        }
        None => Ok((
            Network::new(
                build_network(cfg.arch, hyper, cfg.resnet_depth, &shape, cfg.task.classes())?,
                seed,
            )?,
            None,
        )),
    }
}

/// Holds out validation patients, oversamples the rest with SMOTE and trains.
fn fit(
    cfg: &CvConfig,
    fs: &FeatureConfig,
    hyper: &ClassifierConfig,
    examples: &[FeatureMatrix],
    seed: u64,
) -> Result<TrainOutcome, ModelError> {
    let (train_idx, val_idx) = validation_split(examples, cfg.train.validation_fraction, derive_seed(seed, &[0]));
    let tagged: Vec<Tagged> = train_idx.iter().map(|&i| Tagged::train(examples[i].clone())).collect();
    let val: Vec<FeatureMatrix> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let smote_cfg = SmoteConfig {
        k_neighbors: cfg.smote_neighbors,
        ..SmoteConfig::equalize(derive_seed(seed, &[1]))
    };
    let balanced = smote(&tagged, &smote_cfg)?;
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, &[2]),
        ..cfg.train.clone()
    };
    match fresh_network(cfg, fs, hyper, derive_seed(seed, &[3]))? {
        (net, Some(scaling)) => train_with_scaling(net, scaling, &balanced, &val, &train_cfg, hyper, cfg.task),
        (net, None) => train_with_validation(net, &balanced, &val, &train_cfg, hyper, cfg.task),
    }
}

fn score_events(outcome: &mut TrainOutcome, test: &[FeatureMatrix]) -> Result<Vec<EventScore>, ModelError> {
    let probs = outcome.classifier.predict_probs(test)?;
    test.iter()
        .zip(probs)
        .map(|(fm, p)| Ok(EventScore::new(fm, vec![p])?))
        .collect()
}

struct FoldResult {
    record: FoldRecord,
    checkpoint: Checkpoint,
    scores: Vec<EventScore>,
    head: Vec<usize>,
}

fn predictions(task: Task, scores: &[EventScore]) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    let preds = scores
        .iter()
        .map(|s| classify_event(&s.aggregated, decision_rule(task)))
        .collect();
    let truths = scores
        .iter()
        .map(|s| task.class_index(s.true_label))
        .collect::<Result<_, _>>()?;
    Ok((preds, truths))
}

fn binary_roc(task: Task, scores: &[EventScore]) -> Result<Option<Vec<RocPoint>>, EvalError> {
    let Some(positive) = task.positive_class() else {
        return Ok(None);
    };
    let positive_label = task.labels()[positive];
    let s: Vec<f64> = scores.iter().map(|e| e.aggregated[positive]).collect();
    let t: Vec<bool> = scores.iter().map(|e| e.true_label == positive_label).collect();
    roc_curve(&s, &t).map(Some)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_outer(
    cfg: &CvConfig,
    sets: &[FeatureSet],
    plan: &FoldPlan,
    fold: usize,
    candidates: &[(usize, usize)],
) -> Result<FoldResult, EvalError> {
    let outer = &plan.outer[fold];
    let wrap = |inner: Option<usize>| move |e: ModelError| EvalError::Fold {
        fold,
        inner,
        source: Box::new(e),
    };

    let (chosen, inner_mean_f1) = if candidates.len() == 1 {
        (candidates[0], None)
    } else {
        let jobs: Vec<(usize, usize)> = (0..candidates.len())
            .flat_map(|c| (0..cfg.inner_folds).map(move |j| (c, j)))
            .collect();
        let f1s: Vec<f64> = jobs
            .par_iter()
            .map(|&(c, j)| {
                let (si, hi) = candidates[c];
                let (outer_train, _) = split_by_patients(&sets[si].examples, &outer.test_patients);
                let (inner_train, inner_test) = split_by_patients(&outer_train, &outer.inner_test_patients[j]);
                let seed = derive_seed(cfg.seed, &[3, fold as u64, c as u64, j as u64]);
                let mut outcome = fit(cfg, &sets[si].config, &cfg.classifier_grid[hi], &inner_train, seed)
                    .map_err(wrap(Some(j)))?;
                outcome.classifier.f1(&inner_test).map_err(wrap(Some(j)))
            })
            .collect::<Result<_, EvalError>>()?;
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..candidates.len() {
            let mean = f1s[c * cfg.inner_folds..(c + 1) * cfg.inner_folds].iter().sum::<f64>() / cfg.inner_folds as f64;
            if mean > best.1 {
                best = (c, mean);
            }
        }
        (candidates[best.0], Some(best.1))
    };

    let (si, hi) = chosen;
    let (train, test) = split_by_patients(&sets[si].examples, &outer.test_patients);
    let seed = derive_seed(cfg.seed, &[2, fold as u64]);
    let hyper = &cfg.classifier_grid[hi];
    let mut outcome = fit(cfg, &sets[si].config, hyper, &train, seed).map_err(wrap(None))?;
    let scores = score_events(&mut outcome, &test).map_err(wrap(None))?;
    let (preds, truths) = predictions(cfg.task, &scores).map_err(wrap(None))?;
    let f1 = f1_score(&preds, &truths, f1_mode(cfg.task))?;
    let acc = accuracy(&preds, &truths)?;
    let fold_auc = binary_roc(cfg.task, &scores)?.map(|roc| auc(&roc));
    let test_patients: BTreeSet<&String> = test.iter().map(|fm| &fm.patient_id).collect();
    let dense = outcome.classifier.net.spec().dense_widths();
    Ok(FoldResult {
        record: FoldRecord {
            fold,
            test_patients: test_patients.len(),
            test_events: test.len(),
            f1,
            accuracy: acc,
            auc: fold_auc,
            best_features: sets[si].config,
            best_classifier: *hyper,
            inner_mean_f1,
            epochs_run: outcome.epochs_run(),
            best_epoch: outcome.best_epoch,
        },
        checkpoint: outcome.checkpoint(),
        scores,
        head: dense[dense.len().saturating_sub(2)..].to_vec(),
    })
}

fn check_inputs(cfg: &CvConfig, sets: &[FeatureSet]) -> Result<(), EvalError> {
    if sets.is_empty() || cfg.classifier_grid.is_empty() {
        return Err(EvalError::Config("feature and classifier grids must be nonempty".into()));
    }
    let reference: Vec<&str> = sets[0].examples.iter().map(|fm| fm.event_id.as_str()).collect();
    for set in sets {
        if set.examples.is_empty() {
            return Err(EvalError::Empty("feature set"));
        }
        let ids: Vec<&str> = set.examples.iter().map(|fm| fm.event_id.as_str()).collect();
        if ids != reference {
            return Err(EvalError::Config("feature sets must list the same events in the same order".into()));
        }
        if let Some(fm) = set.examples.iter().find(|fm| fm.synthetic) {
            return Err(EvalError::Config(format!("{} is synthetic; SMOTE runs inside folds", fm.event_id)));
        }
        for fm in &set.examples {
            cfg.task
                .class_index(fm.label)
                .map_err(|e| EvalError::Config(e.to_string()))?;
        }
    }
    Ok(())
}

/// Patient-disjoint nested cross-validation.
///
/// For each outer fold, every (feature set, classifier) pair is trained on
/// the inner training folds and scored on the inner test folds; the pair
/// with the highest mean inner F1 (first on ties) is retrained on the whole
/// outer training set and evaluated on the outer test patients. Inside each
/// training run a patient-disjoint validation share is held out before
/// SMOTE balances the remaining examples.
pub fn nested_cv(sets: &[FeatureSet], cfg: &CvConfig) -> Result<CvOutcome, EvalError> {
    check_inputs(cfg, sets)?;
    let patients = patient_labels(&sets[0].examples);
    let plan = make_folds(&patients, cfg.outer_folds, cfg.inner_folds, cfg.seed)?;
    let candidates: Vec<(usize, usize)> = (0..sets.len())
        .flat_map(|s| (0..cfg.classifier_grid.len()).map(move |h| (s, h)))
        .collect();
    let results: Vec<FoldResult> = (0..cfg.outer_folds)
        .into_par_iter()
        .map(|fold| evaluate_outer(cfg, sets, &plan, fold, &candidates))
        .collect::<Result<_, _>>()?;
    assemble(cfg, plan, results)
}

/// Plain patient-disjoint k-fold CV of one feature set and classifier.
pub fn plain_cv(set: &FeatureSet, hyper: &ClassifierConfig, cfg: &CvConfig) -> Result<CvOutcome, EvalError> {
    let cfg = CvConfig {
        classifier_grid: vec![*hyper],
        ..cfg.clone()
    };
    let sets = std::slice::from_ref(set);
    check_inputs(&cfg, sets)?;
    let plan = make_folds(&patient_labels(&set.examples), cfg.outer_folds, cfg.inner_folds, cfg.seed)?;
    let results: Vec<FoldResult> = (0..cfg.outer_folds)
        .into_par_iter()
        .map(|fold| evaluate_outer(&cfg, sets, &plan, fold, &[(0, 0)]))
        .collect::<Result<_, _>>()?;
    assemble(&cfg, plan, results)
}

fn assemble(cfg: &CvConfig, plan: FoldPlan, results: Vec<FoldResult>) -> Result<CvOutcome, EvalError> {
    let f1s: Vec<f64> = results.iter().map(|r| r.record.f1).collect();
    let (mean_f1, sigma_f1) = mean_and_std(&f1s);
    let mean_accuracy = results.iter().map(|r| r.record.accuracy).sum::<f64>() / results.len() as f64;
    let pooled: Vec<EventScore> = results.iter().flat_map(|r| r.scores.iter().cloned()).collect();
    let roc = binary_roc(cfg.task, &pooled)?;
    let triage = roc.as_deref().map(who_triage_check);
    let report = MetricsReport {
        task: cfg.task,
        architecture: cfg.architecture_name(),
        head: results[0].head.clone(),
        seed: cfg.seed,
        outer_folds: cfg.outer_folds,
        inner_folds: cfg.inner_folds,
        folds: results.iter().map(|r| r.record.clone()).collect(),
        mean_f1,
        sigma_f1,
        mean_accuracy,
        auc: roc.as_deref().map(auc),
        sensitivity_at_specificity_070: triage.map(|t| t.sensitivity),
        sensitivity_at_specificity_080: roc.as_deref().map(|r| sensitivity_at_specificity(r, 0.80)),
        triage_pass: triage.map(|t| t.pass),
        roc: roc.unwrap_or_default(),
    };
    let mut checkpoints = Vec::with_capacity(results.len());
    let mut scores = Vec::with_capacity(results.len());
    for r in results {
        checkpoints.push(r.checkpoint);
        scores.push(r.scores);
    }
    Ok(CvOutcome {
        report,
        plan,
        checkpoints,
        scores,
    })
}
