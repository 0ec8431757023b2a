//! On-disk feature file: magic `CPFM1`, little-endian `u32` rows and cols,
//! `rows * cols` little-endian `f64` values row-major, then a UTF-8 JSON
//! trailer holding the config, identity fields and synthetic flag.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureConfig, FeatureError, FeatureMatrix};
use crate::audio_ingest::Label;

pub const FEATURE_MAGIC: &[u8; 5] = b"CPFM1";

#[derive(Serialize, Deserialize)]
struct Trailer {
    config: FeatureConfig,
    event_id: String,
    patient_id: String,
    label: Label,
    synthetic: bool,
}

pub fn encode_feature_matrix(fm: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + fm.values.len() * 8 + 256);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fm.rows as u32).to_le_bytes());
    out.extend_from_slice(&(fm.cols as u32).to_le_bytes());
    for v in &fm.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let trailer = Trailer {
        config: fm.config,
        event_id: fm.event_id.clone(),
        patient_id: fm.patient_id.clone(),
        label: fm.label,
        synthetic: fm.synthetic,
    };
    out.extend(serde_json::to_vec(&trailer).expect("trailer serializes"));
    out
}

pub fn decode_feature_matrix(bytes: &[u8]) -> Result<FeatureMatrix, FeatureError> {
    let bad = |m: &str| FeatureError::Format(m.to_string());
    if bytes.len() < 13 || &bytes[..5] != FEATURE_MAGIC {
        return Err(bad("missing CPFM1 magic"));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body_end = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(13))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated value block"))?;
    let values: Vec<f64> = bytes[13..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let trailer: Trailer = serde_json::from_slice(&bytes[body_end..])
        .map_err(|e| FeatureError::Format(format!("trailer: {e}")))?;
    if trailer.config.rows() != rows || trailer.config.n_frames != cols {
        return Err(bad("shape disagrees with config"));
    }
    Ok(FeatureMatrix {
        rows,
        cols,
        values,
        config: trailer.config,
        event_id: trailer.event_id,
        patient_id: trailer.patient_id,
        label: trailer.label,
        synthetic: trailer.synthetic,
    })
}

pub fn write_feature_file(path: &Path, fm: &FeatureMatrix) -> Result<(), FeatureError> {
    fs::write(path, encode_feature_matrix(fm))?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    decode_feature_matrix(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(values: Vec<f64>, m: usize, s: usize, synthetic: bool) -> FeatureMatrix {
        FeatureMatrix {
            rows: 3 * m + 2,
            cols: s,
            values,
            config: FeatureConfig::new(m, 512, s),
            event_id: "ev,1".into(),
            patient_id: "pat".into(),
            label: Label::Covid19,
            synthetic,
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let fm = matrix((0..5 * 2).map(|i| i as f64 * 0.5).collect(), 1, 2, true);
        let bytes = encode_feature_matrix(&fm);
        assert_eq!(&bytes[..5], b"CPFM1");
        assert_eq!(&bytes[5..9], &5u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &0.0f64.to_le_bytes());
        assert_eq!(&bytes[21..29], &0.5f64.to_le_bytes());
        let trailer: serde_json::Value = serde_json::from_slice(&bytes[13 + 80..]).unwrap();
        assert_eq!(trailer["synthetic"], true);
        assert_eq!(trailer["label"], "covid19");
        assert_eq!(trailer["config"]["n_mfcc"], 1);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let fm = matrix(vec![1.0; 10], 1, 2, false);
        let bytes = encode_feature_matrix(&fm);
        assert!(decode_feature_matrix(&bytes[..20]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_feature_matrix(&wrong).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 2 * 3..=2 * 3), synthetic: bool) {
            let fm = matrix(vals.iter().cycle().take(5 * 3).copied().collect(), 1, 3, synthetic);
            let back = decode_feature_matrix(&encode_feature_matrix(&fm)).unwrap();
            prop_assert_eq!(back, fm);
        }
    }
}
