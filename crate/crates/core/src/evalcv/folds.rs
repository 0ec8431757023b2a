use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::audio_ingest::Label;
use crate::features::FeatureMatrix;
use crate::models::derive_seed;

pub const OUTER_FOLDS: usize = 5;
pub const INNER_FOLDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterFold {
    pub test_patients: BTreeSet<String>,
    /// Test patients of each inner fold, drawn from this fold's training
    /// patients.
    pub inner_test_patients: Vec<BTreeSet<String>>,
}

impl OuterFold {
    pub fn is_test(&self, patient: &str) -> bool {
        self.test_patients.contains(patient)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub outer: Vec<OuterFold>,
}

/// One label per patient: the label of their first event in input order.
/// Synthetic examples are skipped.
pub fn patient_labels(examples: &[FeatureMatrix]) -> BTreeMap<String, Label> {
    let mut out = BTreeMap::new();
    for fm in examples.iter().filter(|fm| !fm.synthetic) {
        out.entry(fm.patient_id.clone()).or_insert(fm.label);
    }
    out
}

/// Shuffles each label's patients and deals them round-robin into `k`
/// folds. The deal continues from where the previous label stopped, which
/// keeps fold sizes within one of each other.
fn deal(patients: &BTreeMap<String, Label>, k: usize, seed: u64) -> Result<Vec<BTreeSet<String>>, EvalError> {
    let mut by_label: BTreeMap<Label, Vec<&String>> = BTreeMap::new();
    for (p, l) in patients {
        by_label.entry(*l).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![BTreeSet::new(); k];
    let mut next = 0;
    for (label, mut ids) in by_label {
        if ids.len() < k {
            return Err(EvalError::TooFewPatients {
                label,
                count: ids.len(),
                folds: k,
            });
        }
        ids.shuffle(&mut rng);
        for id in ids {
            folds[next % k].insert(id.clone());
            next += 1;
        }
    }
    Ok(folds)
}

/// Stratified patient-level outer folds, each with stratified inner folds
/// over its training patients.
pub fn make_folds(
    patients: &BTreeMap<String, Label>,
    outer_k: usize,
    inner_k: usize,
    seed: u64,
) -> Result<FoldPlan, EvalError> {
    if outer_k < 2 || inner_k < 2 {
        return Err(EvalError::FoldCount);
    }
    let outer_sets = deal(patients, outer_k, derive_seed(seed, &[0]))?;
    let mut outer = Vec::with_capacity(outer_k);
    for (i, test) in outer_sets.into_iter().enumerate() {
        let training: BTreeMap<String, Label> = patients
            .iter()
            .filter(|(p, _)| !test.contains(*p))
            .map(|(p, l)| (p.clone(), *l))
            .collect();
        let inner = deal(&training, inner_k, derive_seed(seed, &[1, i as u64]))?;
        outer.push(OuterFold {
            test_patients: test,
            inner_test_patients: inner,
        });
    }
    Ok(FoldPlan { outer })
}

/// Splits examples into (train, test) by test patient set. Synthetic
/// examples never land on the test side.
pub fn split_by_patients(
    examples: &[FeatureMatrix],
    test_patients: &BTreeSet<String>,
) -> (Vec<FeatureMatrix>, Vec<FeatureMatrix>) {
    let (test, train): (Vec<_>, Vec<_>) = examples
        .iter()
        .cloned()
        .partition(|fm| !fm.synthetic && test_patients.contains(&fm.patient_id));
    (train, test)
}
