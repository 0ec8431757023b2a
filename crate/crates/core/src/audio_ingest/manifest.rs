use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use super::{IngestError, Label};

pub const MANIFEST_HEADER: [&str; 5] = ["audio_path", "event_id", "patient_id", "label", "dataset_name"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest; relative paths are resolved against
    /// the manifest's directory by [`Manifest::resolve_audio`].
    pub audio_path: PathBuf,
    pub event_id: String,
    pub patient_id: String,
    pub label: Label,
    pub dataset_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve_audio(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.audio_path.is_absolute() {
            entry.audio_path.clone()
        } else {
            self.base_dir.join(&entry.audio_path)
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        let mut labels: Vec<Label> = self.entries.iter().map(|e| e.label).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

/// Reads a manifest CSV. Fields are trimmed, labels are case-insensitive and
/// row order is preserved.
pub fn load_manifest(path: &Path) -> Result<Manifest, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::ManifestIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader.headers()?.clone();
    let names: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names != MANIFEST_HEADER {
        return Err(IngestError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != MANIFEST_HEADER.len() {
            return Err(IngestError::MalformedRow {
                line,
                message: format!("expected 5 fields, found {}", record.len()),
            });
        }
        if let Some(i) = (0..5).find(|&i| record[i].is_empty()) {
            return Err(IngestError::MalformedRow {
                line,
                message: format!("empty {}", MANIFEST_HEADER[i]),
            });
        }
        let label: Label = record[3].parse().map_err(|_| IngestError::UnknownLabel {
            line,
            token: record[3].to_string(),
        })?;
        let event_id = record[1].to_string();
        if !seen.insert(event_id.clone()) {
            return Err(IngestError::DuplicateEvent { line, event_id });
        }
        entries.push(ManifestEntry {
            audio_path: PathBuf::from(&record[0]),
            event_id,
            patient_id: record[2].to_string(),
            label,
            dataset_name: record[4].to_string(),
        });
    }

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { base_dir, entries })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for e in &manifest.entries {
        w.write_record([
            e.audio_path.to_string_lossy().as_ref(),
            e.event_id.as_str(),
            e.patient_id.as_str(),
            e.label.token(),
            e.dataset_name.as_str(),
        ])?;
    }
    w.flush().map_err(|source| IngestError::ManifestIo {
        path: path.to_path_buf(),
        source,
    })
}
