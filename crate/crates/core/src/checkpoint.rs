//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `BVAECKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (model
//! configuration, array names and shapes, rng state, free-form metadata),
//! then every array's values as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{NdArray, ParamStore, RngState};
use crate::error::{Error, Result};
use crate::model::{BasisVae, ModelConfig};

pub const MAGIC: &[u8; 8] = b"BVAECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    arrays: Vec<ArrayEntry>,
    rng: Option<RngState>,
    meta: serde_json::Value,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: BasisVae,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            model: self.model.config.clone(),
            arrays: store
                .iter()
                .map(|p| ArrayEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            rng: self.rng,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * store.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        let mut data = &body[len..];
        let mut store = ParamStore::new();
        for entry in &header.arrays {
            let count: usize = entry.shape.iter().product();
            if data.len() < 8 * count {
                return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let (head, rest) = data.split_at(8 * count);
            let values = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.add(entry.name.clone(), NdArray::from_vec(&entry.shape, values)?)?;
            data = rest;
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            model: BasisVae::from_store(header.model, store)?,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::SeededRng;
    use crate::model::Likelihood;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::new(4, 2, 3);
        cfg.likelihood = Likelihood::Zinb;
        cfg.translation_invariant = true;
        let mut rng = SeededRng::new(3);
        let mut model = BasisVae::new(cfg, &mut rng).unwrap();
        model.add_dirichlet_posterior(&[0.5; 3]).unwrap();
        rng.normal();
        Checkpoint {
            model,
            rng: Some(rng.state()),
            meta: serde_json::json!({"restart": 2}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.config, ck.model.config);
        for (a, b) in back.model.store.iter().zip(ck.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut r1 = SeededRng::from_state(&back.rng.unwrap());
        let mut r2 = SeededRng::from_state(&ck.rng.unwrap());
        assert_eq!(r1.normal(), r2.normal());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), ck.to_bytes().unwrap());
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
