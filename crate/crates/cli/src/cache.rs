//! On-disk feature cache.
//!
//! Layout: `<root>/<config hash>/<event>.cpfm` plus `index.json` mapping
//! event ids to file names. Files already present are reused, so grids that
//! share a cache root never clash and reruns only fill gaps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use coughpipe::audio_ingest::{load_recording, preprocess, Manifest, ManifestEntry};
use coughpipe::features::{read_feature_file, write_feature_file, FeatureConfig, FeatureMatrix, MfccExtractor};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub config: FeatureConfig,
    /// Event id to file name inside the config directory.
    pub events: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub event_id: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ExtractSummary {
    pub dir: PathBuf,
    pub written: usize,
    pub reused: usize,
    pub failures: Vec<Failure>,
    /// Features of every event that succeeded, in manifest order.
    pub features: Vec<FeatureMatrix>,
}

pub fn config_dir(root: &Path, cfg: &FeatureConfig) -> PathBuf {
    root.join(cfg.cache_key())
}

/// File name of an event: unsafe characters become `_` and a short hash of
/// the raw id keeps distinct ids apart.
pub fn file_name(event_id: &str) -> String {
    use sha2::{Digest, Sha256};
    let safe: String = event_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    let digest = Sha256::digest(event_id.as_bytes());
    let tag: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
    format!("{safe}-{tag}.cpfm")
}

enum Outcome {
    Written(FeatureMatrix),
    Reused(FeatureMatrix),
    Failed(Failure),
}

fn cached(path: &Path, entry: &ManifestEntry, cfg: &FeatureConfig) -> Option<FeatureMatrix> {
    let mut fm = read_feature_file(path).ok()?;
    if fm.config != *cfg || fm.event_id != entry.event_id {
        return None;
    }
    // Labels and patients come from the manifest, not the cache.
    fm.patient_id = entry.patient_id.clone();
    fm.label = entry.label;
    Some(fm)
}

fn compute(manifest: &Manifest, entry: &ManifestEntry, extractor: &MfccExtractor) -> anyhow::Result<FeatureMatrix> {
    let raw = load_recording(manifest, entry)?;
    let clean = preprocess(&raw)?;
    Ok(extractor.extract(&clean)?)
}

fn write_atomic(path: &Path, fm: &FeatureMatrix) -> anyhow::Result<()> {
    let tmp = path.with_extension("cpfm.tmp");
    write_feature_file(&tmp, fm)?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

fn process(manifest: &Manifest, entry: &ManifestEntry, extractor: &MfccExtractor, dir: &Path) -> Outcome {
    let path = dir.join(file_name(&entry.event_id));
    if let Some(fm) = cached(&path, entry, extractor.config()) {
        return Outcome::Reused(fm);
    }
    let result = compute(manifest, entry, extractor).and_then(|fm| write_atomic(&path, &fm).map(|()| fm));
    match result {
        Ok(fm) => Outcome::Written(fm),
        Err(e) => Outcome::Failed(Failure {
            event_id: entry.event_id.clone(),
            message: format!("{e:#}"),
        }),
    }
}

/// Extracts every event of `manifest` under `cfg` into the cache at `root`.
/// Events that fail are listed in the summary and skipped.
pub fn extract_into_cache(manifest: &Manifest, cfg: &FeatureConfig, root: &Path) -> anyhow::Result<ExtractSummary> {
    let extractor = MfccExtractor::new(cfg)?;
    let dir = config_dir(root, cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let outcomes: Vec<Outcome> = manifest
        .entries
        .par_iter()
        .map(|entry| process(manifest, entry, &extractor, &dir))
        .collect();

    let mut summary = ExtractSummary {
        dir: dir.clone(),
        ..Default::default()
    };
    let mut index = CacheIndex {
        config: *cfg,
        events: BTreeMap::new(),
    };
    for outcome in outcomes {
        let fm = match outcome {
            Outcome::Written(fm) => {
                summary.written += 1;
                fm
            }
            Outcome::Reused(fm) => {
                summary.reused += 1;
                fm
            }
            Outcome::Failed(f) => {
                summary.failures.push(f);
                continue;
            }
        };
        index.events.insert(fm.event_id.clone(), file_name(&fm.event_id));
        summary.features.push(fm);
    }
    let index_path = dir.join(INDEX_FILE);
    let tmp = dir.join(format!("{INDEX_FILE}.tmp"));
    std::fs::write(&tmp, serde_json::to_vec_pretty(&index)?).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, &index_path)?;
    Ok(summary)
}

pub fn read_index(dir: &Path) -> anyhow::Result<CacheIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
