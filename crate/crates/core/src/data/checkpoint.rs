//! Model checkpoints: a JSON header followed by raw `f32` weight arrays.
//!
//! ```text
//! magic      b"QCKP"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON (CheckpointHeader)
//! payload    tensors in header order, f32 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::numerics::{Shape4, Tensor4};
use crate::provenance::Provenance;

const MAGIC: &[u8; 4] = b"QCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Inputs are raw pixels in `[0, 1]`, no mean/std normalization.
pub const INPUT_NORMALIZATION: &str = "raw-unit-range";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Detector,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Shape4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub architecture: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// Per-layer bit width; `None` is full precision.
    #[serde(default)]
    pub bits: Vec<Option<u32>>,
    pub input_normalization: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f32>>,
}

/// Rounds to the nearest `f32`, the checkpoint storage precision.
pub fn round_to_storage(t: &Tensor4) -> Tensor4 {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    pub fn new(
        kind: ModelKind,
        architecture: serde_json::Value,
        named: Vec<(String, &Tensor4)>,
        bits: Vec<Option<u32>>,
        metadata: serde_json::Value,
    ) -> Self {
        let tensors = named
            .iter()
            .map(|(_, t)| t.data().iter().map(|&v| v as f32).collect())
            .collect();
        let entries = named
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind,
                architecture,
                tensors: entries,
                bits,
                input_normalization: INPUT_NORMALIZATION.to_string(),
                metadata,
                provenance: None,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor4> {
        let Some(i) = self.header.tensors.iter().position(|e| e.name == name) else {
            bail!(InvalidArgument, "checkpoint has no tensor named {name:?}");
        };
        Tensor4::new(
            self.header.tensors[i].shape,
            self.tensors[i].iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fmt("missing QCKP magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(fmt("header truncated".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| Error::json(path, e))?;
        let mut offset = 16 + hlen;
        let expected: usize = header.tensors.iter().map(|e| e.shape.numel() * 4).sum();
        if bytes.len() - offset != expected {
            return Err(Error::PayloadSize {
                path: path.to_path_buf(),
                expected: expected as u64,
                actual: (bytes.len() - offset) as u64,
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.numel();
            let t: Vec<f32> = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(fmt(format!("tensor {} has a non-finite value at {i}", e.name)));
            }
            offset += 4 * n;
            tensors.push(t);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Hash over architecture, bit widths and weights. Metadata and
    /// provenance do not participate, so retagging a file keeps it valid.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.header.kind).unwrap());
        h.update(serde_json::to_vec(&self.header.architecture).unwrap());
        h.update(serde_json::to_vec(&self.header.bits).unwrap());
        h.update(serde_json::to_vec(&self.header.tensors).unwrap());
        for t in &self.tensors {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn save_load_is_bit_exact(
            w in prop::collection::vec(-1e3f32..1e3, 1..64),
            bits in prop::option::of(prop::sample::select(vec![4u32, 8, 16])),
        ) {
            let t = Tensor4::new(
                Shape4::new(1, 1, 1, w.len()),
                w.iter().map(|&v| v as f64).collect(),
            ).unwrap();
            let ck = Checkpoint::new(
                ModelKind::Detector,
                serde_json::json!({"layers": 1}),
                vec![("w".into(), &t)],
                vec![bits],
                serde_json::json!({"seed": 1}),
            );
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.ckpt");
            ck.save(&p).unwrap();
            let back = Checkpoint::load(&p).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.tensor("w").unwrap(), t);
            prop_assert_eq!(back.fingerprint(), ck.fingerprint());
        }
    }

    #[test]
    fn fingerprint_ignores_metadata_but_not_weights() {
        let t = Tensor4::new(Shape4::new(1, 1, 1, 2), vec![0.5, -0.25]).unwrap();
        let a = Checkpoint::new(
            ModelKind::Classifier,
            serde_json::json!({}),
            vec![("w".into(), &t)],
            vec![],
            serde_json::json!({"seed": 1}),
        );
        let mut b = a.clone();
        b.header.metadata = serde_json::json!({"seed": 2});
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.tensors[0][1] = -0.5;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        let ck = Checkpoint::new(
            ModelKind::Detector,
            serde_json::json!({}),
            vec![("w".into(), &t)],
            vec![None],
            serde_json::Value::Null,
        );
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            Checkpoint::from_bytes(Path::new("x"), &bytes),
            Err(Error::PayloadSize { expected: 16, actual: 14, .. })
        ));
    }
}
