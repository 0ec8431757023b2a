//! Checkpoint file: magic `CPCK1`, a little-endian `u64` header length, the
//! JSON header (spec, seed, metadata, block names and shapes), then every
//! block's values as little-endian `f64` in spec order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Network, NetworkSpec, NnError};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CPCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub blocks: Vec<ParamBlock>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    seed: u64,
    metadata: BTreeMap<String, serde_json::Value>,
    blocks: Vec<ParamBlock>,
}

/// SHA-256 over the little-endian bytes of the given blocks, hex encoded.
pub fn blocks_checksum<'a>(blocks: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for block in blocks {
        for v in block {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn from_network(net: &Network, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        Checkpoint {
            spec: net.spec().clone(),
            seed: net.seed(),
            metadata,
            blocks: net
                .params()
                .iter()
                .map(|p| ParamBlock {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the network and loads the stored values.
    pub fn to_network(&self) -> Result<Network, NnError> {
        let mut net = Network::new(self.spec.clone(), self.seed)?;
        let params = net.params_mut();
        if params.len() != self.blocks.len() {
            return Err(NnError::Checkpoint(format!(
                "{} blocks stored, spec needs {}",
                self.blocks.len(),
                params.len()
            )));
        }
        for (p, b) in params.into_iter().zip(&self.blocks) {
            if p.shape != b.shape || p.name != b.name {
                return Err(NnError::Checkpoint(format!(
                    "block {} {:?} does not match {} {:?}",
                    b.name, b.shape, p.name, p.shape
                )));
            }
            p.value.copy_from_slice(&b.values);
        }
        Ok(net)
    }

    pub fn checksum(&self) -> String {
        blocks_checksum(self.blocks.iter().map(|b| b.values.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            spec: self.spec.clone(),
            seed: self.seed,
            metadata: self.metadata.clone(),
            blocks: self.blocks.clone(),
        })
        .expect("header serializes");
        let n: usize = self.blocks.iter().map(|b| b.values.len()).sum();
        let mut out = Vec::with_capacity(13 + header.len() + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend(header);
        for b in &self.blocks {
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: String| NnError::Checkpoint(m);
        if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing CPCK1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header_end = 13usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[13..header_end])
            .map_err(|e| bad(format!("header: {e}")))?;
        let mut offset = header_end;
        let mut blocks = header.blocks;
        for b in &mut blocks {
            let n: usize = b.shape.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(bad(format!("truncated block {}", b.name)));
            }
            b.values = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Checkpoint {
            spec: header.spec,
            seed: header.seed,
            metadata: header.metadata,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn net() -> Network {
        let spec = NetworkSpec {
            input_shape: vec![1, 4, 4],
            classes: 2,
            layers: vec![
                LayerSpec::conv(2, 2),
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(2),
                LayerSpec::Softmax,
            ],
        };
        Network::new(spec, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut meta = BTreeMap::new();
        meta.insert("task".to_string(), serde_json::json!("two_class"));
        let ck = Checkpoint::from_network(&net(), meta);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..5], b"CPCK1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.to_network().unwrap().snapshot(), net().snapshot());
    }

    #[test]
    fn running_stats_are_stored() {
        let ck = Checkpoint::from_network(&net(), BTreeMap::new());
        let names: Vec<&str> = ck.blocks.iter().map(|b| b.name.as_str()).collect();
        assert!(names.contains(&"1.batchnorm.running_var"));
    }

    #[test]
    fn truncated_or_padded_files_fail() {
        let bytes = Checkpoint::from_network(&net(), BTreeMap::new()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(Checkpoint::from_bytes(&padded).is_err());
    }
}
