//! SMOTE oversampling of minority classes inside a training fold.
//!
//! Distances are Euclidean on the flattened, unstandardized feature images.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_ingest::Label;
use crate::features::FeatureMatrix;

/// Patient id carried by every synthetic example.
pub const SYNTHETIC_PATIENT: &str = "synthetic";

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("class {label} has {count} example(s); SMOTE needs at least 2")]
    ClassTooSmall { label: Label, count: usize },
    #[error("example {0:?} is tagged as test data; SMOTE only runs on training folds")]
    TestExample(String),
    #[error("feature shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("target count {target} for {label} is below its current count {current}")]
    TargetBelowCount {
        label: Label,
        target: usize,
        current: usize,
    },
    #[error("k_neighbors must be >= 1")]
    ZeroNeighbors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldTag {
    Train,
    Test,
}

/// An example together with the fold it belongs to.
#[derive(Debug, Clone)]
pub struct Tagged {
    pub fold: FoldTag,
    pub example: FeatureMatrix,
}

impl Tagged {
    pub fn train(example: FeatureMatrix) -> Self {
        Tagged {
            fold: FoldTag::Train,
            example,
        }
    }

    pub fn test(example: FeatureMatrix) -> Self {
        Tagged {
            fold: FoldTag::Test,
            example,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SmoteTarget {
    /// Oversample every class up to the largest class count.
    EqualizeToMajority,
    /// Per-class final counts; unlisted classes are left as they are.
    Explicit(BTreeMap<Label, usize>),
    /// Only the listed classes are raised to the largest class count.
    RaiseToMajority(Vec<Label>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    pub target: SmoteTarget,
    pub seed: u64,
}

impl SmoteConfig {
    pub fn equalize(seed: u64) -> Self {
        SmoteConfig {
            k_neighbors: 5,
            target: SmoteTarget::EqualizeToMajority,
            seed,
        }
    }
}

/// Where a synthetic example came from: indices into the input slice and
/// the interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOrigin {
    pub parent: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct SmoteOutput {
    /// Originals in input order, then synthetics in generation order.
    pub examples: Vec<FeatureMatrix>,
    /// One entry per synthetic example, aligned with the tail of `examples`.
    pub origins: Vec<SyntheticOrigin>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other members of `members` for each member, as indices
/// into `data`. Ties break on lower index.
pub fn nearest_neighbors(data: &[&[f64]], members: &[usize], k: usize) -> Vec<Vec<usize>> {
    members
        .par_iter()
        .map(|&i| {
            let mut d: Vec<(f64, usize)> = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (squared_distance(data[i], data[j]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Oversamples minority classes; see [`smote_detailed`].
pub fn smote(examples: &[Tagged], cfg: &SmoteConfig) -> Result<Vec<FeatureMatrix>, BalanceError> {
    smote_detailed(examples, cfg).map(|o| o.examples)
}

/// SMOTE with provenance for every synthetic example.
///
/// Each synthetic image is `x + lambda * (x_nn - x)` with `lambda` uniform in
/// [0, 1), `x` drawn round-robin from its class and `x_nn` one of its
/// `k_neighbors` nearest same-class neighbours. Synthetic examples are marked
/// `synthetic`, carry the class label and [`SYNTHETIC_PATIENT`].
pub fn smote_detailed(examples: &[Tagged], cfg: &SmoteConfig) -> Result<SmoteOutput, BalanceError> {
    if cfg.k_neighbors == 0 {
        return Err(BalanceError::ZeroNeighbors);
    }
    if let Some(t) = examples.iter().find(|t| t.fold == FoldTag::Test) {
        return Err(BalanceError::TestExample(t.example.event_id.clone()));
    }
    if let Some(first) = examples.first() {
        let shape = first.example.shape();
        if let Some(t) = examples.iter().find(|t| t.example.shape() != shape) {
            return Err(BalanceError::ShapeMismatch(shape, t.example.shape()));
        }
    }

    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, t) in examples.iter().enumerate() {
        by_class.entry(t.example.label).or_default().push(i);
    }
    let majority = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut targets: BTreeMap<Label, usize> = match &cfg.target {
        SmoteTarget::EqualizeToMajority => by_class.keys().map(|&l| (l, majority)).collect(),
        SmoteTarget::Explicit(t) => t.clone(),
        SmoteTarget::RaiseToMajority(labels) => labels.iter().map(|&l| (l, majority)).collect(),
    };
    for (label, members) in &by_class {
        targets.entry(*label).or_insert(members.len());
    }

    let data: Vec<&[f64]> = examples.iter().map(|t| t.example.values.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out: Vec<FeatureMatrix> = examples.iter().map(|t| t.example.clone()).collect();
    let mut origins = Vec::new();

    for (&label, &target) in &targets {
        let members = by_class.get(&label).map(Vec::as_slice).unwrap_or(&[]);
        if target < members.len() {
            return Err(BalanceError::TargetBelowCount {
                label,
                target,
                current: members.len(),
            });
        }
        let needed = target - members.len();
        if needed == 0 {
            continue;
        }
        if members.len() < 2 {
            return Err(BalanceError::ClassTooSmall {
                label,
                count: members.len(),
            });
        }
        let k = if cfg.k_neighbors >= members.len() {
            log::warn!(
                "k_neighbors={} >= size of class {label} ({}); using {}",
                cfg.k_neighbors,
                members.len(),
                members.len() - 1
            );
            members.len() - 1
        } else {
            cfg.k_neighbors
        };
        let neighbors = nearest_neighbors(&data, members, k);

        for g in 0..needed {
            let slot = g % members.len();
            let parent = members[slot];
            let neighbor = neighbors[slot][rng.gen_range(0..k)];
            let lambda: f64 = rng.gen();
            let base = &examples[parent].example;
            let values = data[parent]
                .iter()
                .zip(data[neighbor])
                .map(|(x, y)| x + lambda * (y - x))
                .collect();
            out.push(FeatureMatrix {
                rows: base.rows,
                cols: base.cols,
                values,
                config: base.config,
                event_id: format!("synthetic-{label}-{g}"),
                patient_id: SYNTHETIC_PATIENT.to_string(),
                label,
                synthetic: true,
            });
            origins.push(SyntheticOrigin {
                parent,
                neighbor,
                lambda,
            });
        }
    }
    Ok(SmoteOutput {
        examples: out,
        origins,
    })
}

/// Class counts of a set of examples.
pub fn class_counts(examples: &[FeatureMatrix]) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for e in examples {
        *counts.entry(e.label).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use rand_distr::StandardNormal;

    fn point(values: Vec<f64>, label: Label, id: usize) -> FeatureMatrix {
        // Shape is only checked for consistency here, not against the config.
        FeatureMatrix {
            rows: 1,
            cols: values.len(),
            values,
            config: FeatureConfig::new(1, 2, 1),
            event_id: format!("e{id}"),
            patient_id: format!("p{id}"),
            label,
            synthetic: false,
        }
    }

    #[test]
    fn two_point_class_interpolates_on_segment() {
        let ex = vec![
            Tagged::train(point(vec![0.0, 0.0], Label::Covid19, 0)),
            Tagged::train(point(vec![1.0, 1.0], Label::Covid19, 1)),
            Tagged::train(point(vec![5.0, 5.0], Label::Tb, 2)),
            Tagged::train(point(vec![6.0, 5.0], Label::Tb, 3)),
            Tagged::train(point(vec![7.0, 5.0], Label::Tb, 4)),
            Tagged::train(point(vec![8.0, 5.0], Label::Tb, 5)),
        ];
        let cfg = SmoteConfig {
            k_neighbors: 1,
            target: SmoteTarget::Explicit([(Label::Covid19, 50)].into()),
            seed: 3,
        };
        let out = smote(&ex, &cfg).unwrap();
        assert_eq!(out.len(), 54);
        for s in &out[6..] {
            assert!(s.synthetic);
            assert_eq!(s.label, Label::Covid19);
            assert_eq!(s.patient_id, SYNTHETIC_PATIENT);
            assert_eq!(s.values[0], s.values[1]);
            assert!((0.0..=1.0).contains(&s.values[0]));
        }
    }

    #[test]
    fn raise_to_majority_leaves_unlisted_classes() {
        let mut ex = Vec::new();
        let mut id = 0;
        for (label, n) in [(Label::Sneeze, 3), (Label::Speech, 7), (Label::Noise, 5)] {
            for i in 0..n {
                ex.push(Tagged::train(point(vec![i as f64, 1.0], label, id)));
                id += 1;
            }
        }
        let cfg = SmoteConfig {
            k_neighbors: 2,
            target: SmoteTarget::RaiseToMajority(vec![Label::Sneeze]),
            seed: 0,
        };
        let counts = class_counts(&smote(&ex, &cfg).unwrap());
        assert_eq!(counts[&Label::Sneeze], 7);
        assert_eq!(counts[&Label::Speech], 7);
        assert_eq!(counts[&Label::Noise], 5);
    }

    #[test]
    fn equalize_reaches_majority_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ex = Vec::new();
        for i in 0..120 {
            let label = if i < 100 { Label::Tb } else { Label::Covid19 };
            let v = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ex.push(Tagged::train(point(v, label, i)));
        }
        let out = smote(&ex, &SmoteConfig::equalize(7)).unwrap();
        let counts = class_counts(&out);
        assert_eq!(counts[&Label::Tb], 100);
        assert_eq!(counts[&Label::Covid19], 100);
        for (o, t) in out.iter().zip(&ex) {
            assert_eq!(o, &t.example);
        }
    }

    #[test]
    fn interpolation_stays_within_chosen_neighbor_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ex = Vec::new();
        for i in 0..50 {
            let v = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            ex.push(Tagged::train(point(v, Label::Covid19, i)));
        }
        for i in 50..150 {
            let v = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal) + 4.0).collect();
            ex.push(Tagged::train(point(v, Label::Tb, i)));
        }
        let out = smote_detailed(&ex, &SmoteConfig::equalize(5)).unwrap();
        assert_eq!(out.origins.len(), 50);
        let dist = |a: &[f64], b: &[f64]| squared_distance(a, b).sqrt();
        for (s, o) in out.examples[150..].iter().zip(&out.origins) {
            let parent = &ex[o.parent].example.values;
            let nb = &ex[o.neighbor].example.values;
            assert!(dist(&s.values, parent) <= dist(parent, nb) + 1e-12);
            // Brute-force 5-NN of the parent within its class.
            let mut d: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != o.parent)
                .map(|j| (dist(parent, &ex[j].example.values), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let knn: Vec<usize> = d.iter().take(5).map(|x| x.1).collect();
            assert!(knn.contains(&o.neighbor));
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ex: Vec<Tagged> = (0..30)
            .map(|i| {
                let label = if i % 3 == 0 { Label::Covid19 } else { Label::Tb };
                Tagged::train(point((0..6).map(|_| rng.gen()).collect(), label, i))
            })
            .collect();
        let a = smote(&ex, &SmoteConfig::equalize(99)).unwrap();
        let b = smote(&ex, &SmoteConfig::equalize(99)).unwrap();
        let c = smote(&ex, &SmoteConfig::equalize(100)).unwrap();
        let bits = |v: &[FeatureMatrix]| -> Vec<u64> {
            v.iter().flat_map(|m| m.values.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn rejects_test_fold_and_tiny_classes() {
        let ex = vec![
            Tagged::train(point(vec![0.0], Label::Tb, 0)),
            Tagged::test(point(vec![1.0], Label::Tb, 1)),
        ];
        assert_eq!(
            smote(&ex, &SmoteConfig::equalize(0)).unwrap_err(),
            BalanceError::TestExample("e1".into())
        );
        let ex = vec![
            Tagged::train(point(vec![0.0], Label::Tb, 0)),
            Tagged::train(point(vec![1.0], Label::Tb, 1)),
            Tagged::train(point(vec![2.0], Label::Covid19, 2)),
        ];
        assert!(matches!(
            smote(&ex, &SmoteConfig::equalize(0)),
            Err(BalanceError::ClassTooSmall { label: Label::Covid19, count: 1 })
        ));
    }

    #[test]
    fn oversized_k_is_clamped() {
        let ex: Vec<Tagged> = (0..6)
            .map(|i| {
                let label = if i < 3 { Label::Covid19 } else { Label::Tb };
                Tagged::train(point(vec![i as f64], label, i))
            })
            .chain((6..10).map(|i| Tagged::train(point(vec![i as f64], Label::Tb, i))))
            .collect();
        let cfg = SmoteConfig {
            k_neighbors: 10,
            ..SmoteConfig::equalize(1)
        };
        let out = smote(&ex, &cfg).unwrap();
        assert_eq!(class_counts(&out)[&Label::Covid19], 7);
    }

    #[test]
    fn balanced_input_passes_through() {
        let ex: Vec<Tagged> = (0..4)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Covid19 } else { Label::Tb };
                Tagged::train(point(vec![i as f64], label, i))
            })
            .collect();
        let out = smote(&ex, &SmoteConfig::equalize(1)).unwrap();
        assert_eq!(out.len(), 4);
    }
}
