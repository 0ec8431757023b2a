use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::models::Task;

/// Tolerance used when comparing a false-positive rate with a target, so
/// `1 - 0.7` still admits a point at exactly 0.3.
const RATE_SLACK: f64 = 1e-12;

/// Per-class mean of per-frame probability rows.
pub fn aggregate(per_frame: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
    let first = per_frame.first().ok_or(EvalError::Empty("frame probabilities"))?;
    // Summing offsets from the first row keeps a constant column exact.
    let mut offset = vec![0.0; first.len()];
    for row in per_frame {
        if row.len() != offset.len() {
            return Err(EvalError::Length(offset.len(), row.len()));
        }
        for ((o, p), f) in offset.iter_mut().zip(row).zip(first) {
            *o += p - f;
        }
    }
    let n = per_frame.len() as f64;
    Ok(first.iter().zip(offset).map(|(f, o)| f + o / n).collect())
}

/// How an aggregated probability vector becomes a class index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecisionRule {
    /// Binary: `positive` iff its probability is at least `threshold`.
    Threshold { positive: usize, threshold: f64 },
    /// Highest probability, lowest index on ties.
    Argmax,
}

pub fn decision_rule(task: Task) -> DecisionRule {
    match task.positive_class() {
        Some(positive) => DecisionRule::Threshold {
            positive,
            threshold: 0.5,
        },
        None => DecisionRule::Argmax,
    }
}

pub fn classify_event(aggregated: &[f64], rule: DecisionRule) -> usize {
    match rule {
        DecisionRule::Threshold { positive, threshold } => {
            if aggregated[positive] >= threshold {
                positive
            } else {
                1 - positive
            }
        }
        DecisionRule::Argmax => {
            let mut best = 0;
            for (i, &p) in aggregated.iter().enumerate() {
                if p > aggregated[best] {
                    best = i;
                }
            }
            best
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    /// F1 of one class against the rest.
    Positive(usize),
    /// Unweighted mean over this many classes.
    Macro(usize),
}

pub fn f1_mode(task: Task) -> F1Mode {
    match task.positive_class() {
        Some(p) => F1Mode::Positive(p),
        None => F1Mode::Macro(task.classes()),
    }
}

fn check_pair(predictions: &[usize], truths: &[usize]) -> Result<(), EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty("predictions"));
    }
    if predictions.len() != truths.len() {
        return Err(EvalError::Length(predictions.len(), truths.len()));
    }
    Ok(())
}

fn class_f1(predictions: &[usize], truths: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Positive-class F1 is `2TP / (2TP + FP + FN)`; macro F1 averages that over
/// classes, a class without support or predictions contributing 0.
pub fn f1_score(predictions: &[usize], truths: &[usize], mode: F1Mode) -> Result<f64, EvalError> {
    check_pair(predictions, truths)?;
    Ok(match mode {
        F1Mode::Positive(class) => class_f1(predictions, truths, class),
        F1Mode::Macro(classes) => {
            (0..classes).map(|c| class_f1(predictions, truths, c)).sum::<f64>() / classes as f64
        }
    })
}

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64, EvalError> {
    check_pair(predictions, truths)?;
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value count as positive. The (0, 0) point
    /// carries the largest score plus one.
    pub threshold: f64,
}

/// Threshold sweep over the unique scores in descending order, starting at
/// (0, 0) and ending at (1, 1).
pub fn roc_curve(scores: &[f64], truths: &[bool]) -> Result<Vec<RocPoint>, EvalError> {
    if scores.len() != truths.len() {
        return Err(EvalError::Length(scores.len(), truths.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let positives = truths.iter().filter(|&&t| t).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let max = scores[order[0]];
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: max + 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Highest sensitivity reachable with a false-positive rate of at most
/// `1 - target_specificity`, interpolating linearly along the curve.
pub fn sensitivity_at_specificity(points: &[RocPoint], target_specificity: f64) -> f64 {
    let max_fpr = 1.0 - target_specificity + RATE_SLACK;
    let mut best: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        if p.fpr <= max_fpr {
            best = best.max(p.tpr);
            if let Some(next) = points.get(i + 1) {
                if next.fpr > max_fpr {
                    let t = (1.0 - target_specificity - p.fpr) / (next.fpr - p.fpr);
                    best = best.max(p.tpr + t.clamp(0.0, 1.0) * (next.tpr - p.tpr));
                }
            }
        }
    }
    best
}

pub const TRIAGE_SPECIFICITY: f64 = 0.70;
pub const TRIAGE_SENSITIVITY: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageResult {
    pub pass: bool,
    /// Sensitivity at 0.70 specificity.
    pub sensitivity: f64,
}

/// Passes when sensitivity at 70% specificity is at least 90%.
pub fn who_triage_check(points: &[RocPoint]) -> TriageResult {
    let sensitivity = sensitivity_at_specificity(points, TRIAGE_SPECIFICITY);
    TriageResult {
        pass: sensitivity >= TRIAGE_SENSITIVITY - RATE_SLACK,
        sensitivity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_auc(scores: &[f64], truths: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if truths[i] && !truths[j] {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn diagonal() -> Vec<RocPoint> {
        (0..=10)
            .map(|i| RocPoint {
                fpr: i as f64 / 10.0,
                tpr: i as f64 / 10.0,
                threshold: 1.0 - i as f64 / 10.0,
            })
            .collect()
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate(&vec![vec![0.7, 0.3]; 150]).unwrap(), [0.7, 0.3]);
        let agg = aggregate(&[vec![0.2, 0.8], vec![0.4, 0.6], vec![0.9, 0.1]]).unwrap();
        assert!((agg[0] - 0.5).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn decision_rules() {
        let two = decision_rule(Task::TwoClass);
        assert_eq!(classify_event(&[0.5, 0.5], two), 1);
        assert_eq!(classify_event(&[0.51, 0.49], two), 0);
        assert_eq!(classify_event(&[0.2, 0.3, 0.5], DecisionRule::Argmax), 2);
        assert_eq!(classify_event(&[0.4, 0.4, 0.2], DecisionRule::Argmax), 0);
    }

    #[test]
    fn f1_examples() {
        let truth = [1, 1, 0, 0, 1, 0];
        assert_eq!(f1_score(&truth, &truth, F1Mode::Positive(1)).unwrap(), 1.0);
        // TP = 2, FP = 1, FN = 1
        let pred = [1, 1, 1, 0, 0, 0];
        let truth = [1, 1, 0, 0, 1, 0];
        assert!((f1_score(&pred, &truth, F1Mode::Positive(1)).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(f1_score(&[], &[], F1Mode::Positive(1)).is_err());
    }

    #[test]
    fn macro_f1_matches_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let mut cm = [[0usize; 3]; 3];
            for (&p, &t) in pred.iter().zip(&truth) {
                cm[t][p] += 1;
            }
            let mean: f64 = (0..3)
                .map(|c| {
                    let tp = cm[c][c] as f64;
                    let fp: f64 = (0..3).filter(|&t| t != c).map(|t| cm[t][c] as f64).sum();
                    let fn_: f64 = (0..3).filter(|&p| p != c).map(|p| cm[c][p] as f64).sum();
                    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                    if precision + recall > 0.0 {
                        2.0 * precision * recall / (precision + recall)
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / 3.0;
            assert!((f1_score(&pred, &truth, F1Mode::Macro(3)).unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_examples() {
        let roc = roc_curve(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert!(roc.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&roc), 1.0);
        let flat = roc_curve(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        let coords: Vec<(f64, f64)> = flat.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(coords, [(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&flat), 0.5);
        assert!(matches!(roc_curve(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn roc_points_match_confusion_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..50).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let mut truths: Vec<bool> = (0..50).map(|_| rng.gen()).collect();
        truths[0] = true;
        truths[1] = false;
        let pos = truths.iter().filter(|&&t| t).count() as f64;
        let neg = 50.0 - pos;
        let roc = roc_curve(&scores, &truths).unwrap();
        for p in &roc {
            let tp = scores.iter().zip(&truths).filter(|(&s, &t)| t && s >= p.threshold).count() as f64;
            let fp = scores.iter().zip(&truths).filter(|(&s, &t)| !t && s >= p.threshold).count() as f64;
            assert_eq!(p.tpr, tp / pos);
            assert_eq!(p.fpr, fp / neg);
        }
    }

    #[test]
    fn sensitivity_examples() {
        let perfect = roc_curve(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(sensitivity_at_specificity(&perfect, 0.8), 1.0);
        assert!((sensitivity_at_specificity(&diagonal(), 0.7) - 0.3).abs() < 1e-9);
        let coarse = [
            RocPoint { fpr: 0.0, tpr: 0.0, threshold: 2.0 },
            RocPoint { fpr: 1.0, tpr: 1.0, threshold: 0.0 },
        ];
        assert!((sensitivity_at_specificity(&coarse, 0.7) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_matches_threshold_search_when_a_point_lands_on_target() {
        // 10 negatives make every multiple of 0.1 an attainable FPR.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let scores: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
            let truths: Vec<bool> = (0..30).map(|i| i >= 10).collect();
            let roc = roc_curve(&scores, &truths).unwrap();
            for target in [0.7, 0.8, 0.9] {
                let brute = roc
                    .iter()
                    .map(|p| p.threshold)
                    .filter_map(|thr| {
                        let fp = (0..10).filter(|&i| scores[i] >= thr).count() as f64 / 10.0;
                        let tp = (10..30).filter(|&i| scores[i] >= thr).count() as f64 / 20.0;
                        (1.0 - fp >= target - 1e-12).then_some(tp)
                    })
                    .fold(0.0, f64::max);
                assert!((sensitivity_at_specificity(&roc, target) - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triage_rule() {
        let pass = [
            RocPoint { fpr: 0.0, tpr: 0.0, threshold: 2.0 },
            RocPoint { fpr: 0.2, tpr: 0.96, threshold: 0.5 },
            RocPoint { fpr: 1.0, tpr: 1.0, threshold: 0.0 },
        ];
        assert!(who_triage_check(&pass).pass);
        let fail = who_triage_check(&diagonal());
        assert!(!fail.pass);
        assert!((fail.sensitivity - 0.3).abs() < 1e-9);
        let boundary = [
            RocPoint { fpr: 0.0, tpr: 0.0, threshold: 2.0 },
            RocPoint { fpr: 0.3, tpr: 0.9, threshold: 0.5 },
            RocPoint { fpr: 1.0, tpr: 1.0, threshold: 0.0 },
        ];
        assert!(who_triage_check(&boundary).pass);
    }

    proptest! {
        #[test]
        fn auc_equals_pair_ranking(raw in prop::collection::vec((0u8..12, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 11.0).collect();
            let truths: Vec<bool> = raw.iter().map(|(_, t)| *t).collect();
            prop_assume!(truths.iter().any(|&t| t) && truths.iter().any(|&t| !t));
            let roc = roc_curve(&scores, &truths).unwrap();
            prop_assert!((auc(&roc) - pair_auc(&scores, &truths)).abs() < 1e-9);
            prop_assert!(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
            let last = roc.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }

        #[test]
        fn negated_scores_flip_auc(scores in prop::collection::hash_set(0u32..100_000, 4..40)) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64).collect();
            let truths: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc(&roc_curve(&scores, &truths).unwrap());
            let b = auc(&roc_curve(&neg, &truths).unwrap());
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn aggregation_is_column_mean(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..200)) {
            let agg = aggregate(&rows).unwrap();
            for c in 0..3 {
                let brute = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
                prop_assert!((agg[c] - brute).abs() < 1e-12);
            }
        }
    }
}
