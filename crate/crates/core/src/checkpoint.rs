//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `FGRMCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter value as a little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use fgrm_tensor::ParameterSet;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 8] = b"FGRMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub config_hash: String,
    pub seed: u64,
    /// Free-form stage label, e.g. `pretrained` or `tuned-id`.
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParameterSet, config_hash: &str, seed: u64, stage: &str) -> Result<Self> {
        model.check_params(&params)?;
        let tensors = params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect();
        Ok(Self {
            header: CheckpointHeader {
                model,
                tensors,
                config_hash: config_hash.to_string(),
                seed,
                stage: stage.to_string(),
            },
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header is plain data");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.iter() {
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| CoreError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| fail("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| fail(format!("invalid header: {e}")))?;
        let mut data = bytes[20 + len..].chunks_exact(8);
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() != total || !data.remainder().is_empty() {
            return Err(fail(format!(
                "expected {total} values, found {} bytes of data",
                bytes.len() - 20 - len
            )));
        }
        let mut params = ParameterSet::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let values = data
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(&t.name, &t.shape, values).map_err(|e| fail(e.to_string()))?;
        }
        header.model.check_params(&params)?;
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg).unwrap();
        // awkward values must survive bit-exactly
        params.iter_mut().next().unwrap().values[0] = -0.0;
        params.iter_mut().next().unwrap().values[1] = f64::MIN_POSITIVE / 3.0;
        Checkpoint::new(cfg, params, "abc", 7, "pretrained").unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.header, ck.header);
        let bits = |p: &ParameterSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ck.params));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let cfg = ModelConfig::default();
        let other = ModelConfig {
            widths: vec![4, 4],
            ..cfg.clone()
        };
        assert!(matches!(
            Checkpoint::new(cfg, init_params(&other).unwrap(), "", 0, "x"),
            Err(CoreError::Architecture(_))
        ));
    }
}
