//! Checkpoint container: one line of JSON header followed by a little-endian f64 blob.
//!
//! A checkpoint holds one or more named parts (a network each) plus free-form
//! metadata. The header carries every part's topology and weight count, and the
//! SHA-256 of the blob.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::network::{LayerSpec, Sequential};

pub const FORMAT: &str = "rvekit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartHeader {
    name: String,
    topology: Vec<LayerSpec>,
    n_weights: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    parts: Vec<PartHeader>,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPart {
    pub name: String,
    pub topology: Vec<LayerSpec>,
    pub state: Vec<f64>,
}

impl CheckpointPart {
    /// Rebuilds the network from the stored topology and weights.
    pub fn build(&self) -> Result<Sequential> {
        let mut net = Sequential::from_specs(&self.topology, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.load_state(&self.state)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub parts: Vec<CheckpointPart>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            parts: Vec::new(),
        }
    }

    pub fn with_part(mut self, name: impl Into<String>, net: &Sequential) -> Self {
        self.push(name, net);
        self
    }

    pub fn push(&mut self, name: impl Into<String>, net: &Sequential) {
        self.parts.push(CheckpointPart {
            name: name.into(),
            topology: net.specs(),
            state: net.state(),
        });
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(NnError::Topology(format!(
                "checkpoint holds a '{}' model, expected '{kind}'",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn part(&self, name: &str) -> Result<&CheckpointPart> {
        self.parts
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| NnError::Topology(format!("checkpoint has no part '{name}'")))
    }

    /// Rebuilds part `name`, requiring its topology to equal `expected`.
    pub fn restore(&self, name: &str, expected: &[LayerSpec]) -> Result<Sequential> {
        let part = self.part(name)?;
        if part.topology != expected {
            return Err(NnError::Topology(format!("part '{name}' has a different layer layout")));
        }
        part.build()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        for p in &self.parts {
            for v in &p.state {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            parts: self
                .parts
                .iter()
                .map(|p| PartHeader {
                    name: p.name.clone(),
                    topology: p.topology.clone(),
                    n_weights: p.state.len(),
                })
                .collect(),
            sha256: hex::encode(Sha256::digest(&blob)),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| NnError::Format("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT {
            return Err(NnError::Format(format!("unknown format '{}'", header.format)));
        }
        if header.version != VERSION {
            return Err(NnError::Format(format!("unsupported version {}", header.version)));
        }
        let blob = &bytes[nl + 1..];
        let total: usize = header.parts.iter().map(|p| p.n_weights).sum();
        if blob.len() != 8 * total {
            return Err(NnError::Format(format!(
                "weight blob holds {} bytes, header declares {} values",
                blob.len(),
                total
            )));
        }
        let found = hex::encode(Sha256::digest(blob));
        if found != header.sha256 {
            return Err(NnError::Hash {
                expected: header.sha256,
                found,
            });
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut parts = Vec::with_capacity(header.parts.len());
        for p in header.parts {
            let state: Vec<f64> = values.by_ref().take(p.n_weights).collect();
            let part = CheckpointPart {
                name: p.name,
                topology: p.topology,
                state,
            };
            // Weight count must agree with the declared topology.
            let probe = Sequential::from_specs(&part.topology, &mut ChaCha8Rng::seed_from_u64(0))?;
            if probe.state_len() != part.state.len() {
                return Err(NnError::Topology(format!(
                    "part '{}' declares {} weights but its layers hold {}",
                    part.name,
                    part.state.len(),
                    probe.state_len()
                )));
            }
            parts.push(part);
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            parts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mode;
    use ndarray::Array2;

    fn specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(4, 5),
            LayerSpec::batch_norm(5),
            LayerSpec::selu(),
            LayerSpec::dense(5, 2),
        ]
    }

    fn trained() -> Sequential {
        let mut net = Sequential::from_specs(&specs(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - j as f64) * 0.3).into_dyn();
        net.forward(&x, Mode::Train).unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut net = trained();
        let ck = Checkpoint::new("toy", serde_json::json!({"epochs": 3})).with_part("main", &net);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let mut back = loaded.restore("main", &specs()).unwrap();
        let probe = Array2::from_shape_fn((3, 4), |(i, j)| (i * j) as f64 * 0.1 - 0.2).into_dyn();
        let a = net.forward(&probe, Mode::Eval).unwrap();
        let b = back.forward(&probe, Mode::Eval).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let bytes = Checkpoint::new("toy", serde_json::Value::Null)
            .with_part("main", &trained())
            .to_bytes()
            .unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(NnError::Hash { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(NnError::Format(_))
        ));
    }

    #[test]
    fn wrong_kind_or_layout_is_a_topology_error() {
        let ck = Checkpoint::new("toy", serde_json::Value::Null).with_part("main", &trained());
        assert!(matches!(ck.expect_kind("other"), Err(NnError::Topology(_))));
        let mut other = specs();
        other[0] = LayerSpec::dense(4, 6);
        assert!(matches!(ck.restore("main", &other), Err(NnError::Topology(_))));
        assert!(matches!(ck.part("missing"), Err(NnError::Topology(_))));
    }
}
