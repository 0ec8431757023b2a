//! Synthetic labelled audio with a class-specific spectral signature.
//!
//! Each label owns a frequency band. An event is a burst of band-limited
//! sound between stretches of near silence; per-patient jitter moves the
//! band centre and per-event jitter moves duration and level. Sounds of the
//! pre-training labels share the bands of the cough labels but differ in
//! temporal shape.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio_ingest::{write_manifest, write_wav, IngestError, Label, Manifest, ManifestEntry};
use crate::models::derive_seed;

/// Band centre of a label in Hz.
pub fn band_centre_hz(label: Label) -> f64 {
    match label {
        Label::Tb | Label::Sneeze => 500.0,
        Label::Covid19 | Label::Speech => 1500.0,
        Label::Healthy | Label::Noise => 3000.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    pub events_per_patient: usize,
    /// Relative spread of the per-patient band centre.
    pub patient_jitter: f64,
    /// Silence before and after the burst, in seconds.
    pub padding_secs: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate_hz: 16_000,
            events_per_patient: 2,
            patient_jitter: 0.04,
            padding_secs: 0.15,
            seed: 0,
        }
    }
}

const PARTIALS: usize = 6;
const FLOOR_STD: f64 = 1e-4;

fn label_code(label: Label) -> u64 {
    Label::ALL.iter().position(|&l| l == label).unwrap() as u64
}

/// Amplitude envelope in [0, 1] at time `t` of a burst lasting `len` seconds.
fn envelope(label: Label, t: f64, len: f64) -> f64 {
    let attack = (t / 0.01).min(1.0);
    match label {
        // Explosive onset then decay.
        Label::Tb | Label::Covid19 | Label::Healthy => attack * (-3.0 * t / len).exp(),
        Label::Sneeze => {
            let peak = 0.7 * len;
            if t < peak {
                (t / peak).powi(2)
            } else {
                (-12.0 * (t - peak) / len).exp()
            }
        }
        // Syllable-rate modulation.
        Label::Speech => attack * (0.55 + 0.45 * (2.0 * PI * 4.0 * t).sin()),
        Label::Noise => attack,
    }
}

/// One event's samples for patient `patient` of `label`.
pub fn synth_event(label: Label, patient: usize, event: usize, cfg: &SynthConfig) -> Vec<f64> {
    let mut patient_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[label_code(label), patient as u64]));
    let centre = band_centre_hz(label) * (1.0 + cfg.patient_jitter * patient_rng.gen_range(-1.0..1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &[label_code(label), patient as u64, event as u64 + 1],
    ));
    let rate = cfg.sample_rate_hz as f64;
    let burst_secs = rng.gen_range(0.25..0.4);
    let level = rng.gen_range(0.3..0.7);
    let partials: Vec<(f64, f64)> = (0..PARTIALS)
        .map(|_| (centre * rng.gen_range(0.94..1.06), rng.gen_range(0.0..2.0 * PI)))
        .collect();

    let pad = (cfg.padding_secs * rate).round() as usize;
    let burst = (burst_secs * rate).round() as usize;
    let floor = Normal::new(0.0, FLOOR_STD).unwrap();
    let mut out = Vec::with_capacity(2 * pad + burst);
    for _ in 0..pad {
        out.push(floor.sample(&mut rng));
    }
    for i in 0..burst {
        let t = i as f64 / rate;
        let tone: f64 = partials
            .iter()
            .map(|&(f, phase)| (2.0 * PI * f * t + phase).sin())
            .sum::<f64>()
            / PARTIALS as f64;
        let noise = floor.sample(&mut rng);
        out.push(level * envelope(label, t, burst_secs) * tone + noise);
    }
    for _ in 0..pad {
        out.push(floor.sample(&mut rng));
    }
    out
}

/// Writes `patients` patients per label as WAV files under `dir/audio` plus
/// `dir/manifest.csv`, and returns the manifest.
pub fn write_corpus(
    dir: &Path,
    patients: &[(Label, usize)],
    dataset_name: &str,
    cfg: &SynthConfig,
) -> Result<Manifest, IngestError> {
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|source| IngestError::ManifestIo {
        path: audio_dir.clone(),
        source,
    })?;
    let mut entries = Vec::new();
    for &(label, count) in patients {
        for p in 0..count {
            let patient_id = format!("{}-{p:03}", label.token());
            for e in 0..cfg.events_per_patient {
                let event_id = format!("{patient_id}-e{e}");
                let rel = PathBuf::from("audio").join(format!("{event_id}.wav"));
                write_wav(&dir.join(&rel), &synth_event(label, p, e, cfg), cfg.sample_rate_hz)?;
                entries.push(ManifestEntry {
                    audio_path: rel,
                    event_id,
                    patient_id: patient_id.clone(),
                    label,
                    dataset_name: dataset_name.to_string(),
                });
            }
        }
    }
    let manifest = Manifest {
        base_dir: dir.to_path_buf(),
        entries,
    };
    write_manifest(&dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}
