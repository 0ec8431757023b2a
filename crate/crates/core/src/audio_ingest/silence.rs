//! Energy-detector silence removal.
//!
//! Short-time energy is the mean square amplitude over non-overlapping 10 ms
//! windows. A window is silent when its energy falls below the threshold. Runs
//! of more than `2 * margin` silent windows are cut down to `margin` windows
//! of context next to each active region. Cuts happen on window boundaries,
//! so a second pass with the same absolute threshold sees the same windows and
//! removes nothing more.

use super::{IngestError, Recording};

pub const DEFAULT_ENERGY_THRESHOLD: f64 = 0.01;
pub const DEFAULT_MARGIN_MS: f64 = 50.0;
const WINDOW_MS: f64 = 10.0;
const REFERENCE_PERCENTILE: f64 = 0.95;

fn window_len(rate: u32) -> usize {
    ((rate as f64 * WINDOW_MS / 1000.0).round() as usize).max(1)
}

fn window_energies(samples: &[f64], win: usize) -> Vec<f64> {
    samples
        .chunks(win)
        .map(|w| w.iter().map(|s| s * s).sum::<f64>() / w.len() as f64)
        .collect()
}

/// Nearest-rank percentile.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Removes silence with a threshold relative to the recording's
/// 95th-percentile window energy.
pub fn remove_silence(
    r: &Recording,
    energy_threshold: f64,
    margin_ms: f64,
) -> Result<Recording, IngestError> {
    assert!(
        energy_threshold > 0.0 && energy_threshold < 1.0,
        "energy threshold must lie in (0, 1)"
    );
    let energies = window_energies(&r.samples, window_len(r.sample_rate_hz));
    let mut reference = percentile(&energies, REFERENCE_PERCENTILE);
    if reference <= 0.0 {
        // Sparse events: fewer than 5% of windows carry any energy.
        reference = energies.iter().copied().fold(0.0, f64::max);
    }
    if reference <= 0.0 {
        return Err(IngestError::AllSilent(r.event_id.clone()));
    }
    remove_silence_absolute(r, energy_threshold * reference, margin_ms)
}

/// Marks which windows survive: silent runs longer than `2 * margin_windows`
/// are cut, keeping `margin_windows` windows beside each active neighbour.
fn keep_mask(silent: &[bool], margin_windows: usize) -> Vec<bool> {
    let n = silent.len();
    let mut keep = vec![true; n];
    let mut i = 0;
    while i < n {
        if !silent[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && silent[i] {
            i += 1;
        }
        let end = i;
        if end - start <= 2 * margin_windows {
            continue;
        }
        let cut_from = if start == 0 { 0 } else { start + margin_windows };
        let cut_to = if end == n { n } else { end - margin_windows };
        keep[cut_from..cut_to].iter_mut().for_each(|k| *k = false);
    }
    keep
}

/// Removes silence using an absolute mean-square energy threshold.
pub fn remove_silence_absolute(
    r: &Recording,
    threshold: f64,
    margin_ms: f64,
) -> Result<Recording, IngestError> {
    assert!(margin_ms >= 0.0, "margin must be non-negative");
    let win = window_len(r.sample_rate_hz);
    let energies = window_energies(&r.samples, win);
    let silent: Vec<bool> = energies.iter().map(|&e| e < threshold).collect();
    if silent.iter().all(|&s| s) {
        return Err(IngestError::AllSilent(r.event_id.clone()));
    }

    let margin_samples = (r.sample_rate_hz as f64 * margin_ms / 1000.0).round() as usize;
    let keep = keep_mask(&silent, margin_samples.div_ceil(win));

    let samples: Vec<f64> = r
        .samples
        .chunks(win)
        .zip(&keep)
        .filter(|(_, &k)| k)
        .flat_map(|(w, _)| w.iter().copied())
        .collect();
    Ok(r.with_samples(samples, r.sample_rate_hz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_ingest::Label;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn rec(samples: Vec<f64>) -> Recording {
        Recording::new(samples, 16000, "e", "p", Label::Tb, "d").unwrap()
    }

    fn tone(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 0.5 * (2.0 * PI * 1000.0 * i as f64 / 16000.0 + 0.3).sin())
            .collect()
    }

    #[test]
    fn gap_is_cut_to_margin_on_both_sides() {
        let mut s = tone(8000);
        s.extend(vec![0.0; 16000]);
        s.extend(tone(8000));
        let input = s.clone();
        let out = remove_silence(&rec(s), DEFAULT_ENERGY_THRESHOLD, 50.0).unwrap();
        // 50 ms at 16 kHz on each side of the gap.
        assert_eq!(out.samples.len(), 8000 + 800 + 800 + 8000);
        assert_eq!(&out.samples[..8800], &input[..8800]);
        assert_eq!(&out.samples[8800..], &input[24000 - 800..]);
        assert!(out.samples[8000..9600].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn no_silence_is_identity() {
        let s = tone(12345);
        let out = remove_silence(&rec(s.clone()), DEFAULT_ENERGY_THRESHOLD, 50.0).unwrap();
        assert_eq!(out.samples, s);
    }

    #[test]
    fn all_zero_signal_is_an_error() {
        let err = remove_silence(&rec(vec![0.0; 4000]), DEFAULT_ENERGY_THRESHOLD, 50.0);
        assert!(matches!(err, Err(IngestError::AllSilent(_))));
    }

    #[test]
    fn short_gaps_survive() {
        let mut s = tone(4000);
        s.extend(vec![0.0; 1600]); // exactly 2 x margin
        s.extend(tone(4000));
        let out = remove_silence(&rec(s.clone()), DEFAULT_ENERGY_THRESHOLD, 50.0).unwrap();
        assert_eq!(out.samples, s);
    }

    #[test]
    fn leading_and_trailing_silence_keep_one_margin() {
        let mut s = vec![0.0; 8000];
        s.extend(tone(4000));
        s.extend(vec![0.0; 8000]);
        let out = remove_silence(&rec(s), DEFAULT_ENERGY_THRESHOLD, 50.0).unwrap();
        assert_eq!(out.samples.len(), 800 + 4000 + 800);
    }

    #[test]
    fn sparse_event_uses_peak_reference() {
        let mut s = tone(800);
        s.extend(vec![0.0; 48000]);
        let out = remove_silence(&rec(s), DEFAULT_ENERGY_THRESHOLD, 50.0).unwrap();
        assert_eq!(out.samples.len(), 800 + 800);
    }

    fn segments() -> impl Strategy<Value = Vec<(bool, usize)>> {
        prop::collection::vec((any::<bool>(), 1usize..4000), 1..8)
    }

    fn build(segs: &[(bool, usize)]) -> Vec<f64> {
        let mut s = tone(400);
        for &(loud, len) in segs {
            if loud {
                s.extend(tone(len));
            } else {
                s.extend(vec![0.0; len]);
            }
        }
        s
    }

    proptest! {
        #[test]
        fn absolute_threshold_is_idempotent(segs in segments(), margin in 0.0f64..80.0) {
            let r = rec(build(&segs));
            let once = remove_silence_absolute(&r, 1e-3, margin).unwrap();
            let twice = remove_silence_absolute(&once, 1e-3, margin).unwrap();
            prop_assert_eq!(once.samples, twice.samples);
        }

        #[test]
        fn relative_threshold_is_idempotent_on_gated_tones(segs in segments()) {
            let r = rec(build(&segs));
            let once = remove_silence(&r, DEFAULT_ENERGY_THRESHOLD, 50.0).unwrap();
            let twice = remove_silence(&once, DEFAULT_ENERGY_THRESHOLD, 50.0).unwrap();
            prop_assert_eq!(once.samples, twice.samples);
        }

        #[test]
        fn samples_near_active_windows_survive(segs in segments(), margin in 0.0f64..80.0) {
            let r = rec(build(&segs));
            let threshold = 1e-3;
            let out = remove_silence_absolute(&r, threshold, margin).unwrap();
            prop_assert!(out.samples.len() <= r.samples.len());

            let win = window_len(16000);
            let energies = window_energies(&r.samples, win);
            let margin_samples = (16000.0 * margin / 1000.0_f64).round() as usize;
            let silent: Vec<bool> = energies.iter().map(|&e| e < threshold).collect();
            let kept = keep_mask(&silent, margin_samples.div_ceil(win));
            let expected_len: usize = r
                .samples
                .chunks(win)
                .zip(&kept)
                .filter(|(_, &k)| k)
                .map(|(w, _)| w.len())
                .sum();
            prop_assert_eq!(out.samples.len(), expected_len);
            for (i, &e) in energies.iter().enumerate() {
                if e >= threshold {
                    let lo = (i * win).saturating_sub(margin_samples) / win;
                    let hi = (((i + 1) * win + margin_samples).div_ceil(win)).min(energies.len());
                    for (j, &kj) in kept.iter().enumerate().take(hi).skip(lo) {
                        prop_assert!(kj, "window {} near active {} was dropped", j, i);
                    }
                }
            }
        }
    }
}
