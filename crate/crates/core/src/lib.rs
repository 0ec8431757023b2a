//! Cough classification pipeline: audio preprocessing, fixed-size spectral
//! features, SMOTE balancing, small neural classifiers with transfer
//! learning, patient-disjoint nested cross-validation and triage metrics.

pub mod audio_ingest;
pub mod features;
pub mod balance;
pub mod nn;
pub mod evalcv;
pub mod models;
pub mod synth;
