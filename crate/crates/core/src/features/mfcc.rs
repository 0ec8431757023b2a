use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureConfig, FeatureError};

/// Floor applied to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale from 0 Hz to Nyquist,
/// evaluated at the `n_fft / 2 + 1` bin frequencies. A filter too narrow to
/// cover any bin gets unit weight on the bin nearest its centre, so no band
/// is identically zero.
pub fn mel_filterbank(n_filters: usize, n_fft: usize, sample_rate_hz: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;

    (0..n_filters)
        .map(|m| {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut w: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f > lo && f <= centre {
                        (f - lo) / (centre - lo)
                    } else if f > centre && f < hi {
                        (hi - f) / (hi - centre)
                    } else {
                        0.0
                    }
                })
                .collect();
            if w.iter().all(|&v| v == 0.0) {
                let nearest = ((centre / bin_hz).round() as usize).min(n_bins - 1);
                w[nearest] = 1.0;
            }
            w
        })
        .collect()
}

/// Per-frame MFCC computation with precomputed window, filterbank, DCT basis
/// and FFT plan.
///
/// Hamming window, power spectrum from an FFT of the next power of two at or
/// above the frame length, mel filterbank, natural log with a floor, then an
/// orthonormal DCT-II truncated to `n_mfcc` coefficients.
pub struct MfccExtractor {
    config: FeatureConfig,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per filter: first nonzero bin and the weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
    /// `n_mfcc` rows of `n_mel_filters` DCT-II weights.
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let n_fft = cfg.frame_len.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let f = cfg.frame_len;
        let window = (0..f)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (f - 1) as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg.n_mel_filters, n_fft, cfg.sample_rate_hz)
            .into_iter()
            .map(|w| {
                let first = w.iter().position(|&v| v != 0.0).unwrap_or(0);
                let last = w.iter().rposition(|&v| v != 0.0).unwrap_or(0);
                (first, w[first..=last].to_vec())
            })
            .collect();
        let n = cfg.n_mel_filters as f64;
        let dct = (0..cfg.n_mfcc)
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                (0..cfg.n_mel_filters)
                    .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                    .collect()
            })
            .collect();
        Ok(MfccExtractor {
            config: *cfg,
            n_fft,
            fft,
            window,
            filters,
            dct,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Log mel energies of one frame.
    pub fn log_mel(&self, frame: &[f64]) -> Vec<f64> {
        assert_eq!(frame.len(), self.config.frame_len, "frame length mismatch");
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.n_fft)
            .collect();
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|(first, w)| {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect()
    }

    /// The `n_mfcc` cepstral coefficients of one frame.
    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let log_mel = self.log_mel(frame);
        self.dct
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// One-off MFCC computation for a single frame.
pub fn mfcc_frame(frame: &[f64], cfg: &FeatureConfig) -> Result<Vec<f64>, FeatureError> {
    if frame.len() != cfg.frame_len {
        return Err(FeatureError::InvalidConfig(format!(
            "frame has {} samples, config expects {}",
            frame.len(),
            cfg.frame_len
        )));
    }
    Ok(MfccExtractor::new(cfg)?.compute(frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frame_gives_constant_cepstrum() {
        let cfg = FeatureConfig::new(13, 512, 70);
        let c = mfcc_frame(&vec![0.0; 512], &cfg).unwrap();
        let expected = (cfg.n_mel_filters as f64).sqrt() * LOG_FLOOR.ln();
        assert!((c[0] - expected).abs() < 1e-9);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn doubling_amplitude_shifts_only_c0() {
        let cfg = FeatureConfig::new(26, 1024, 70);
        let x: Vec<f64> = (0..1024)
            .map(|i| ((i * 7919 % 1013) as f64 / 1013.0 - 0.5) * 0.4)
            .collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = mfcc_frame(&x, &cfg).unwrap();
        let b = mfcc_frame(&x2, &cfg).unwrap();
        let shift = 2.0 * 2f64.ln() * (cfg.n_mel_filters as f64).sqrt();
        assert!((b[0] - a[0] - shift).abs() < 1e-9);
        for k in 1..26 {
            assert!((a[k] - b[k]).abs() < 1e-9, "coefficient {k}");
        }
    }

    #[test]
    fn every_filter_has_support() {
        for &(n, fft) in &[(65, 512), (40, 512), (65, 4096)] {
            let bank = mel_filterbank(n, fft, 16000);
            assert_eq!(bank.len(), n);
            assert!(bank.iter().all(|w| w.iter().any(|&v| v > 0.0)));
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 999.985).abs() < 1e-2);
    }

    #[test]
    fn wrong_frame_length_is_rejected() {
        let cfg = FeatureConfig::new(13, 512, 70);
        assert!(mfcc_frame(&[0.0; 100], &cfg).is_err());
    }
}
