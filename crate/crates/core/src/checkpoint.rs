//! Checkpoint container: magic, JSON header, little-endian f64 payload.
//!
//! Layout: `SBGANCK1`, header length (u64 LE), header JSON, payload. The
//! header records the producing run's configuration, its hash, the tensor
//! table and a sha256 of the payload.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SBGANCK1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes).as_slice())
}

/// Hash of a configuration value's compact JSON serialization.
pub fn config_hash(config: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(config).expect("json value serializes").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub step: u64,
    pub stage: usize,
    pub alpha: f64,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, step: u64, stage: usize, alpha: f64) -> Self {
        Checkpoint {
            header: Header {
                kind: kind.to_string(),
                config_hash: config_hash(&config),
                config,
                step,
                stage,
                alpha,
                tensors: Vec::new(),
                payload_sha256: String::new(),
            },
            tensors: Vec::new(),
        }
    }

    /// Append tensors under `prefix.`.
    pub fn push(&mut self, prefix: &str, named: Vec<(String, Tensor)>) {
        for (n, t) in named {
            self.tensors.push((format!("{prefix}.{n}"), t));
        }
    }

    /// Tensors stored under `prefix.`, with the prefix stripped, in order.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.tensors.iter().map(|(_, t)| t.len() * 8).sum());
        for (_, t) in &self.tensors {
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut header = self.header.clone();
        header.tensors = self
            .tensors
            .iter()
            .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect();
        header.payload_sha256 = sha256_hex(&payload);
        let hj = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + hj.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        out.extend_from_slice(&hj);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Load("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(Error::Load("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Load(format!("unreadable header: {e}")))?;
        let recomputed = config_hash(&header.config);
        if recomputed != header.config_hash {
            return Err(Error::Load(format!(
                "config hash mismatch: header says {}, stored config hashes to {recomputed}",
                header.config_hash
            )));
        }
        let payload = &body[hlen..];
        let actual = sha256_hex(payload);
        if actual != header.payload_sha256 {
            return Err(Error::Load(format!(
                "payload hash mismatch (expected {}, found {actual}) for run config {}",
                header.payload_sha256, header.config_hash
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut off = 0usize;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = off + n * 8;
            if end > payload.len() {
                return Err(Error::Load(format!("payload too short for tensor {}", e.name)));
            }
            let vals = payload[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_shape_vec(IxDyn(&e.shape), vals).expect("shape")));
            off = end;
        }
        if off != payload.len() {
            return Err(Error::Load("trailing bytes after payload".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Write atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Load(format!("checkpoint not found: {}", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Refuse checkpoints of another kind or from a run with another config.
    pub fn expect(&self, kind: &str, config_hash: Option<&str>) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Load(format!("expected a {kind} checkpoint, found {}", self.header.kind)));
        }
        if let Some(h) = config_hash {
            if h != self.header.config_hash {
                return Err(Error::Load(format!(
                    "config hash mismatch: checkpoint {}, current run {h}",
                    self.header.config_hash
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("seg", serde_json::json!({"k": 4, "lr": 0.001}), 7, 1, 0.5);
        c.push("g", vec![("w".into(), arr2(&[[1.0, -2.5], [3.0, 1e-300]]).into_dyn())]);
        c.push("opt", vec![("t".into(), ndarray::arr1(&[7.0]).into_dyn())]);
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.tensors, c.tensors);
        assert_eq!(back.header.step, 7);
        assert_eq!(back.group("g")[0].0, "w");
        assert_eq!(c.to_bytes(), back.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 1;
        let e = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(e, Error::Load(ref m) if m.contains("hash mismatch")), "{e}");
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn expect_checks_kind_and_hash() {
        let c = sample();
        assert!(c.expect("seg", Some(&c.header.config_hash)).is_ok());
        assert!(c.expect("spade", None).is_err());
        let e = c.expect("seg", Some("abc")).unwrap_err();
        assert!(e.to_string().contains("config hash mismatch"));
    }
}
