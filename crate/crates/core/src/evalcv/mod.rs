//! Event score aggregation, classification metrics, ROC analysis and
//! patient-disjoint nested cross-validation.

mod cv;
mod folds;
mod metrics;

use thiserror::Error;

use crate::audio_ingest::Label;
use crate::models::ModelError;

pub use cv::{mean_and_std, nested_cv, plain_cv, CvConfig, CvOutcome, EventScore, FeatureSet, FoldRecord, MetricsReport};
pub use folds::{
    make_folds, patient_labels, split_by_patients, FoldPlan, OuterFold, INNER_FOLDS, OUTER_FOLDS,
};
pub use metrics::{
    accuracy, aggregate, auc, classify_event, decision_rule, f1_mode, f1_score, roc_curve,
    sensitivity_at_specificity, who_triage_check, DecisionRule, F1Mode, RocPoint, TriageResult,
    TRIAGE_SENSITIVITY, TRIAGE_SPECIFICITY,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("ROC needs both classes present")]
    SingleClass,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("{label} has {count} patient(s), fewer than {folds} folds")]
    TooFewPatients { label: Label, count: usize, folds: usize },
    #[error("fold counts must be at least 2")]
    FoldCount,
    #[error("outer fold {fold}{}: {source}", inner.map(|i| format!(", inner fold {i}")).unwrap_or_default())]
    Fold {
        fold: usize,
        inner: Option<usize>,
        source: Box<ModelError>,
    },
    #[error("invalid cross-validation input: {0}")]
    Config(String),
}
