/// Regression delta along the time axis of an `n_rows x n_cols` row-major
/// matrix: `d_t = sum_n n (c[t+n] - c[t-n]) / (2 sum_n n^2)`, with the first
/// and last columns replicated past the edges.
pub fn delta(series: &[f64], n_rows: usize, n_cols: usize, half_width: usize) -> Vec<f64> {
    assert_eq!(series.len(), n_rows * n_cols, "series shape mismatch");
    if half_width == 0 || n_cols == 0 {
        return vec![0.0; series.len()];
    }
    let denom = 2.0 * (1..=half_width).map(|n| (n * n) as f64).sum::<f64>();
    let last = n_cols as isize - 1;
    let mut out = vec![0.0; series.len()];
    for r in 0..n_rows {
        let row = &series[r * n_cols..(r + 1) * n_cols];
        let at = |i: isize| row[i.clamp(0, last) as usize];
        for t in 0..n_cols {
            let t = t as isize;
            let num: f64 = (1..=half_width as isize)
                .map(|n| n as f64 * (at(t + n) - at(t - n)))
                .sum();
            out[r * n_cols + t as usize] = num / denom;
        }
    }
    out
}

/// Fraction of adjacent sample pairs that change sign; zero counts as positive.
pub fn zcr_frame(frame: &[f64]) -> f64 {
    assert!(frame.len() >= 2, "zero-crossing rate needs two samples");
    let crossings = frame
        .windows(2)
        .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
        .count();
    crossings as f64 / (frame.len() - 1) as f64
}

/// Population kurtosis `m4 / m2^2` (not excess). Frames with variance below
/// 1e-12 return 0.
pub fn kurtosis_frame(frame: &[f64]) -> f64 {
    assert!(frame.len() >= 2, "kurtosis needs two samples");
    let n = frame.len() as f64;
    let mean = frame.iter().sum::<f64>() / n;
    let (m2, m4) = frame.iter().fold((0.0, 0.0), |(m2, m4), &x| {
        let d = (x - mean) * (x - mean);
        (m2 + d, m4 + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 < 1e-12 {
        0.0
    } else {
        m4 / (m2 * m2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn delta_of_constant_is_zero() {
        let m = vec![3.5; 4 * 9];
        assert!(delta(&m, 4, 9, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_of_ramp_is_one_inside() {
        let ramp: Vec<f64> = (0..10).map(f64::from).collect();
        let d = delta(&ramp, 1, 10, 2);
        for &v in &d[2..8] {
            assert!((v - 1.0).abs() < 1e-15);
        }
        // Edge replication flattens the slope at the ends.
        assert!(d[0] < 1.0 && d[9] < 1.0);
    }

    #[test]
    fn delta_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m: Vec<f64> = (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = delta(&m, 3, 7, 2);
        // Brute force with an explicitly padded copy of each row.
        for r in 0..3 {
            let row = &m[r * 7..(r + 1) * 7];
            let mut padded = vec![row[0]; 2];
            padded.extend_from_slice(row);
            padded.extend([row[6]; 2]);
            for t in 0..7 {
                let c = |k: usize| padded[k];
                let expected = (1.0 * (c(t + 3) - c(t + 1)) + 2.0 * (c(t + 4) - c(t))) / 10.0;
                assert!((d[r * 7 + t] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zcr_extremes() {
        assert_eq!(zcr_frame(&[1.0, -1.0, 1.0, -1.0]), 1.0);
        assert_eq!(zcr_frame(&[1.0, 1.0, 1.0, 1.0]), 0.0);
        assert_eq!(zcr_frame(&[0.0, -1.0, 0.0]), 1.0);
    }

    #[test]
    fn zcr_matches_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f: Vec<f64> = (0..513).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut count = 0;
        for i in 0..512 {
            if f[i] != f[i + 1] {
                count += 1;
            }
        }
        assert_eq!(zcr_frame(&f), count as f64 / 512.0);
    }

    #[test]
    fn kurtosis_of_known_distributions() {
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((kurtosis_frame(&alt) - 1.0).abs() < 1e-12);
        assert_eq!(kurtosis_frame(&[0.3; 50]), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let k = kurtosis_frame(&g);
        assert!((k - 3.0).abs() < 0.15, "normal kurtosis {k}");
    }

    proptest! {
        #[test]
        fn zcr_in_unit_interval_and_kurtosis_nonnegative(
            f in prop::collection::vec(-1.0f64..1.0, 2..300)
        ) {
            let z = zcr_frame(&f);
            prop_assert!((0.0..=1.0).contains(&z));
            prop_assert!(kurtosis_frame(&f) >= 0.0);
        }
    }
}
