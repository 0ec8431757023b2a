//! Fixed-dimension `(3M + 2) x S` feature images: MFCCs, their velocity and
//! acceleration, zero-crossing rate and kurtosis, one column per frame.
//!
//! Row layout: `0..M` static MFCCs, `M..2M` velocity, `2M..3M` acceleration,
//! `3M` zero-crossing rate, `3M + 1` kurtosis.

mod cache;
mod mfcc;
mod stats;

pub use cache::{read_feature_file, write_feature_file, FEATURE_MAGIC};
pub use mfcc::{hz_to_mel, mel_filterbank, mel_to_hz, mfcc_frame, MfccExtractor, LOG_FLOOR};
pub use stats::{delta, kurtosis_frame, zcr_frame};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_ingest::{Label, Recording};

/// Lower-order MFCC counts searched over.
pub const MFCC_GRID: [usize; 5] = [13, 26, 39, 52, 65];
/// Frame lengths in samples searched over.
pub const FRAME_LEN_GRID: [usize; 4] = [512, 1024, 2048, 4096];
/// Frames-per-event counts searched over.
pub const FRAME_COUNT_GRID: [usize; 5] = [70, 100, 120, 150, 200];

pub const DEFAULT_DELTA_HALF_WIDTH: usize = 2;
pub const MIN_MEL_FILTERS: usize = 40;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot frame an empty signal")]
    EmptySignal,
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("recording {event_id:?} is at {actual} Hz but the feature config expects {expected} Hz")]
    SampleRateMismatch {
        event_id: String,
        actual: u32,
        expected: u32,
    },
    #[error("feature file: {0}")]
    Format(String),
    #[error("feature file io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Lower-order MFCCs kept (M).
    pub n_mfcc: usize,
    /// Frame length in samples (F).
    pub frame_len: usize,
    /// Frames per event (S).
    pub n_frames: usize,
    pub sample_rate_hz: u32,
    pub n_mel_filters: usize,
    pub delta_half_width: usize,
}

impl FeatureConfig {
    /// Config at the pipeline rate with default filterbank and delta window.
    pub fn new(n_mfcc: usize, frame_len: usize, n_frames: usize) -> Self {
        FeatureConfig {
            n_mfcc,
            frame_len,
            n_frames,
            sample_rate_hz: crate::audio_ingest::PIPELINE_SAMPLE_RATE_HZ,
            n_mel_filters: MIN_MEL_FILTERS.max(n_mfcc),
            delta_half_width: DEFAULT_DELTA_HALF_WIDTH,
        }
    }

    /// Feature setting used for the pre-training corpus (M=39, F=1024, S=150).
    pub fn pretraining() -> Self {
        Self::new(39, 1024, 150)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidConfig(m.to_string()));
        if self.n_mfcc < 1 {
            return bad("n_mfcc must be >= 1");
        }
        if self.frame_len < 2 {
            return bad("frame_len must be >= 2");
        }
        if self.n_frames < 1 {
            return bad("n_frames must be >= 1");
        }
        if self.n_mel_filters < self.n_mfcc {
            return bad("n_mel_filters must be >= n_mfcc");
        }
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive");
        }
        Ok(())
    }

    /// Rows of the feature image, `3M + 2`.
    pub fn rows(&self) -> usize {
        3 * self.n_mfcc + 2
    }

    /// Stable content hash used to key feature caches.
    pub fn cache_key(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Every (M, F, S) combination of the search grid.
    pub fn full_grid() -> Vec<FeatureConfig> {
        let mut out = Vec::new();
        for &m in &MFCC_GRID {
            for &f in &FRAME_LEN_GRID {
                for &s in &FRAME_COUNT_GRID {
                    out.push(FeatureConfig::new(m, f, s));
                }
            }
        }
        out
    }
}

/// Feature image of one audio event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub config: FeatureConfig,
    pub event_id: String,
    pub patient_id: String,
    pub label: Label,
    /// Set on SMOTE-generated examples.
    #[serde(default)]
    pub synthetic: bool,
}

impl FeatureMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Splits `samples` into exactly `n_frames` frames of `frame_len` samples.
///
/// Frame `i` starts at `round(i * hop)` with `hop = (len - F) / (S - 1)`, so
/// the first frame starts at 0 and the last one ends at the signal end. Short
/// signals are zero-padded at the end to `F + S - 1` samples, which keeps the
/// starts strictly increasing.
pub fn frame_signal(
    samples: &[f64],
    frame_len: usize,
    n_frames: usize,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    if samples.is_empty() {
        return Err(FeatureError::EmptySignal);
    }
    if frame_len == 0 || n_frames == 0 {
        return Err(FeatureError::InvalidConfig(
            "frame length and frame count must be positive".into(),
        ));
    }
    Ok(frame_starts(samples.len(), frame_len, n_frames)
        .into_iter()
        .map(|s| {
            (s..s + frame_len)
                .map(|i| if i < samples.len() { samples[i] } else { 0.0 })
                .collect::<Vec<f64>>()
        })
        .collect())
}

/// Start offsets used by [`frame_signal`] for a signal of `len` samples.
pub fn frame_starts(len: usize, frame_len: usize, n_frames: usize) -> Vec<usize> {
    let len = len.max(frame_len + n_frames - 1);
    if n_frames == 1 {
        return vec![0];
    }
    let hop = (len - frame_len) as f64 / (n_frames - 1) as f64;
    (0..n_frames).map(|i| (i as f64 * hop).round() as usize).collect()
}

/// Computes the `(3M + 2) x S` feature image of a recording.
pub fn extract_features(r: &Recording, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    MfccExtractor::new(cfg)?.extract(r)
}

impl MfccExtractor {
    /// Feature image using this extractor's precomputed tables.
    pub fn extract(&self, r: &Recording) -> Result<FeatureMatrix, FeatureError> {
        let cfg = *self.config();
        if r.sample_rate_hz != cfg.sample_rate_hz {
            return Err(FeatureError::SampleRateMismatch {
                event_id: r.event_id.clone(),
                actual: r.sample_rate_hz,
                expected: cfg.sample_rate_hz,
            });
        }
        let frames = frame_signal(&r.samples, cfg.frame_len, cfg.n_frames)?;
        let m = cfg.n_mfcc;
        let s = cfg.n_frames;

        // Static coefficients as an M x S row-major block.
        let mut statics = vec![0.0; m * s];
        let mut zcr = Vec::with_capacity(s);
        let mut kurt = Vec::with_capacity(s);
        for (col, frame) in frames.iter().enumerate() {
            let c = self.compute(frame);
            for (row, v) in c.iter().enumerate() {
                statics[row * s + col] = *v;
            }
            zcr.push(zcr_frame(frame));
            kurt.push(kurtosis_frame(frame));
        }
        let velocity = delta(&statics, m, s, cfg.delta_half_width);
        let acceleration = delta(&velocity, m, s, cfg.delta_half_width);

        let mut values = Vec::with_capacity(cfg.rows() * s);
        values.extend_from_slice(&statics);
        values.extend_from_slice(&velocity);
        values.extend_from_slice(&acceleration);
        values.extend_from_slice(&zcr);
        values.extend_from_slice(&kurt);
        debug_assert!(values.iter().all(|v| v.is_finite()));

        Ok(FeatureMatrix {
            rows: cfg.rows(),
            cols: s,
            values,
            config: cfg,
            event_id: r.event_id.clone(),
            patient_id: r.patient_id.clone(),
            label: r.label,
            synthetic: false,
        })
    }
}
