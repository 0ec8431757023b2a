//! Dataset manifests, WAV loading, resampling and energy-based silence removal.

mod manifest;
mod resample;
mod silence;

pub use manifest::{load_manifest, write_manifest, Manifest, ManifestEntry};
pub use resample::resample;
pub use silence::{
    remove_silence, remove_silence_absolute, DEFAULT_ENERGY_THRESHOLD, DEFAULT_MARGIN_MS,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample rate every recording is brought to before feature extraction.
pub const PIPELINE_SAMPLE_RATE_HZ: u32 = 16_000;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read manifest {path}: {source}")]
    ManifestIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("manifest line {line}: unknown label token {token:?}")]
    UnknownLabel { line: u64, token: String },
    #[error("manifest line {line}: duplicate event_id {event_id:?}")]
    DuplicateEvent { line: u64, event_id: String },
    #[error("manifest header must be `audio_path,event_id,patient_id,label,dataset_name`, found {0:?}")]
    BadHeader(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot read audio {path}: {message}")]
    Audio { path: PathBuf, message: String },
    #[error("invalid recording {event_id:?}: {message}")]
    InvalidRecording { event_id: String, message: String },
    #[error("all-silent recording {0:?}")]
    AllSilent(String),
}

/// Closed label set shared by the classification and pre-training corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Tb,
    Covid19,
    Healthy,
    Sneeze,
    Speech,
    Noise,
}

impl Label {
    pub const ALL: [Label; 6] = [
        Label::Tb,
        Label::Covid19,
        Label::Healthy,
        Label::Sneeze,
        Label::Speech,
        Label::Noise,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Label::Tb => "tb",
            Label::Covid19 => "covid19",
            Label::Healthy => "healthy",
            Label::Sneeze => "sneeze",
            Label::Speech => "speech",
            Label::Noise => "noise",
        }
    }

    /// True for labels that describe a cough recording.
    pub fn is_cough(self) -> bool {
        matches!(self, Label::Tb | Label::Covid19 | Label::Healthy)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLabel(pub String);

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.token() == t)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// A labelled mono audio event.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub event_id: String,
    pub patient_id: String,
    pub label: Label,
    pub dataset_name: String,
}

impl Recording {
    pub fn new(
        samples: Vec<f64>,
        sample_rate_hz: u32,
        event_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: Label,
        dataset_name: impl Into<String>,
    ) -> Result<Self, IngestError> {
        let r = Recording {
            samples,
            sample_rate_hz,
            event_id: event_id.into(),
            patient_id: patient_id.into(),
            label,
            dataset_name: dataset_name.into(),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let fail = |message: &str| {
            Err(IngestError::InvalidRecording {
                event_id: self.event_id.clone(),
                message: message.to_string(),
            })
        };
        if self.samples.is_empty() {
            return fail("no samples");
        }
        if self.sample_rate_hz == 0 {
            return fail("sample rate must be positive");
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return fail("non-finite sample");
        }
        Ok(())
    }

    /// Copy of this recording's metadata with new samples and rate.
    pub(crate) fn with_samples(&self, samples: Vec<f64>, sample_rate_hz: u32) -> Recording {
        Recording {
            samples,
            sample_rate_hz,
            event_id: self.event_id.clone(),
            patient_id: self.patient_id.clone(),
            label: self.label,
            dataset_name: self.dataset_name.clone(),
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Reads a WAV file as mono samples in [-1, 1]. Integer formats are scaled by
/// their full-scale value; multi-channel audio is averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), IngestError> {
    let audio_err = |message: String| IngestError::Audio {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let full_scale = (1_i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<Result<_, _>>()
                .map_err(|e| audio_err(e.to_string()))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
    };
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|c| (c.iter().sum::<f64>() / c.len() as f64).clamp(-1.0, 1.0))
        .collect();
    if mono.is_empty() {
        return Err(audio_err("no samples".into()));
    }
    Ok((mono, spec.sample_rate))
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate_hz: u32) -> Result<(), IngestError> {
    let audio_err = |e: hound::Error| IngestError::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(audio_err)?;
    }
    w.finalize().map_err(audio_err)
}

/// Loads the audio behind a manifest entry into a [`Recording`].
pub fn load_recording(manifest: &Manifest, entry: &ManifestEntry) -> Result<Recording, IngestError> {
    let (samples, rate) = read_wav(&manifest.resolve_audio(entry))?;
    Recording::new(
        samples,
        rate,
        entry.event_id.clone(),
        entry.patient_id.clone(),
        entry.label,
        entry.dataset_name.clone(),
    )
}

/// Resample to the pipeline rate and strip silence with the default detector.
pub fn preprocess(r: &Recording) -> Result<Recording, IngestError> {
    let resampled = resample(r, PIPELINE_SAMPLE_RATE_HZ);
    remove_silence(&resampled, DEFAULT_ENERGY_THRESHOLD, DEFAULT_MARGIN_MS)
}
