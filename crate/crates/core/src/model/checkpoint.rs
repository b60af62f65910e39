//! Binary checkpoint format.
//!
//! ```text
//! "D3FN" | u32 schema version | u64 header length | JSON header
//!        | f32 little-endian payload | 8-byte checksum of the payload
//! ```
//!
//! All integers are little-endian. The header holds the model config, the
//! step counter, optional optimizer metadata, and an ordered tensor index
//! (name, shape, dtype, byte offset into the payload). The checksum is the
//! first eight bytes of the payload's SHA-256 digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"D3FN";
pub const SCHEMA_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<IndexEntry>,
}

fn checksum(payload: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(payload);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

fn to_f32<T: Element>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f64_lossy() as f32).collect()
}

fn from_f32<T: Element>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()
}

impl Checkpoint {
    /// Snapshot of parameters, batch-norm statistics and (optionally)
    /// optimizer moments, in store order.
    pub fn capture<T: Element>(model: &Model<T>, step: u64, adam: Option<&AdamState<T>>) -> Self {
        let mut tensors = Vec::new();
        for (_, name, t) in model.store.params() {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: to_f32(t.data()),
            });
        }
        for (_, name, s) in model.store.bn_states() {
            for (suffix, v) in [(RUNNING_MEAN, &s.running_mean), (RUNNING_VAR, &s.running_var)] {
                tensors.push(NamedTensor {
                    name: format!("{name}{suffix}"),
                    shape: vec![v.len()],
                    data: to_f32(v),
                });
            }
        }
        let optimizer = adam.map(|a| {
            for ((_, name, t), (m, v)) in model.store.params().zip(a.m.iter().zip(&a.v)) {
                for (prefix, buf) in [(ADAM_M, m), (ADAM_V, v)] {
                    tensors.push(NamedTensor {
                        name: format!("{prefix}{name}"),
                        shape: t.shape().to_vec(),
                        data: to_f32(buf),
                    });
                }
            }
            OptimizerMeta {
                t: a.t,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            }
        });
        Checkpoint {
            config: model.cfg.clone(),
            step,
            optimizer,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::checkpoint(format!("tensors.{name}"), "missing"))
    }

    /// Copies the stored state into `model`. The stored config must equal
    /// the model's.
    pub fn restore_into<T: Element>(&self, model: &mut Model<T>) -> Result<()> {
        if self.config.variant != model.cfg.variant {
            return Err(Error::checkpoint(
                "config.variant",
                format!(
                    "checkpoint is `{}`, model is `{}`",
                    self.config.variant.name(),
                    model.cfg.variant.name()
                ),
            ));
        }
        if self.config != model.cfg {
            return Err(Error::checkpoint("config", "checkpoint config differs from model config"));
        }
        let ids: Vec<_> = model.store.params().map(|(id, n, t)| (id, n.to_string(), t.shape().to_vec())).collect();
        for (id, name, shape) in ids {
            let t = self.find(&name)?;
            if t.shape != shape {
                return Err(Error::checkpoint(
                    format!("tensors.{name}.shape"),
                    format!("{:?} vs model {:?}", t.shape, shape),
                ));
            }
            model.store.set(id, from_f32(&t.data))?;
        }
        let bns: Vec<_> = model.store.bn_states().map(|(id, n, s)| (id, n.to_string(), s.running_mean.len())).collect();
        for (id, name, c) in bns {
            let mean = self.find(&format!("{name}{RUNNING_MEAN}"))?;
            let var = self.find(&format!("{name}{RUNNING_VAR}"))?;
            if mean.data.len() != c || var.data.len() != c {
                return Err(Error::checkpoint(format!("tensors.{name}"), "channel count mismatch"));
            }
            let state = model.store.bn_mut(id);
            state.running_mean = from_f32(&mean.data);
            state.running_var = from_f32(&var.data);
        }
        Ok(())
    }

    /// Optimizer state for `model`'s parameters, if one was saved.
    pub fn adam_state<T: Element>(&self, model: &Model<T>) -> Result<Option<AdamState<T>>> {
        let Some(meta) = self.optimizer else {
            return Ok(None);
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, t) in model.store.params() {
            for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                let stored = self.find(&format!("{prefix}{name}"))?;
                if stored.data.len() != t.numel() {
                    return Err(Error::checkpoint(format!("tensors.{prefix}{name}"), "size mismatch"));
                }
                out.push(from_f32(&stored.data));
            }
        }
        Ok(Some(AdamState {
            m,
            v,
            t: meta.t,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
        }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for t in &self.tensors {
            index.push(IndexEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            optimizer: self.optimizer,
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&checksum(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::checkpoint("magic", "file shorter than the fixed preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::checkpoint("magic", format!("expected D3FN, found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SCHEMA_VERSION {
            return Err(Error::checkpoint(
                "schema_version",
                format!("unsupported version {version} (expected {SCHEMA_VERSION})"),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(Error::checkpoint("header_length", "header extends past end of file"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::checkpoint("header", e.to_string()))?;
        let rest = &body[header_len..];
        if rest.len() < 8 {
            return Err(Error::checkpoint("checksum", "truncated"));
        }
        let (payload, sum) = rest.split_at(rest.len() - 8);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0usize;
        for (i, e) in header.tensors.into_iter().enumerate() {
            if e.dtype != "f32" {
                return Err(Error::checkpoint(format!("tensors[{i}].dtype"), format!("unsupported `{}`", e.dtype)));
            }
            if e.offset as usize != expected_offset {
                return Err(Error::checkpoint(
                    format!("tensors[{i}].offset"),
                    format!("{} (expected {expected_offset})", e.offset),
                ));
            }
            let n: usize = e.shape.iter().product();
            let end = expected_offset + 4 * n;
            if end > payload.len() {
                return Err(Error::checkpoint("payload", format!("truncated inside tensor `{}`", e.name)));
            }
            let data = payload[expected_offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset = end;
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if expected_offset != payload.len() {
            return Err(Error::checkpoint(
                "payload",
                format!("{} bytes indexed, {} present", expected_offset, payload.len()),
            ));
        }
        if checksum(payload) != sum {
            return Err(Error::checkpoint("checksum", "payload checksum mismatch"));
        }
        header.config.validate().map_err(|e| Error::checkpoint("config", e.to_string()))?;
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            optimizer: header.optimizer,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    Checkpoint::capture(model, 0, None).save(path)
}

/// Rebuilds a model from the config stored in the checkpoint.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::new(ckpt.config.clone())?;
    ckpt.restore_into(&mut model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small(variant: Variant) -> Model<f32> {
        let mut cfg = ModelConfig::desk(64, variant, 9);
        cfg.encoder_widths = vec![4, 8, 12, 16];
        cfg.encoder_blocks = vec![1, 1, 1, 1];
        cfg.dade = crate::dade::DadeConfig::new(16, vec![1, 3, 5, 9], 2, 0.5).unwrap();
        Model::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = small(Variant::Full);
        let bytes = Checkpoint::capture(&m, 7, None).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 7);
        let mut fresh = small(Variant::Full);
        let ids: Vec<_> = fresh.store.params().map(|(id, _, t)| (id, t.numel())).collect();
        for (id, n) in ids {
            fresh.store.set(id, vec![0.0; n]).unwrap();
        }
        back.restore_into(&mut fresh).unwrap();
        for ((_, _, a), (_, _, b)) in m.store.params().zip(fresh.store.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(Checkpoint::capture(&fresh, 7, None).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let m = small(Variant::Baseline);
        let mut bytes = Checkpoint::capture(&m, 0, None).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "checksum"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_corruption_names_field() {
        let m = small(Variant::Baseline);
        let bytes = Checkpoint::capture(&m, 0, None).to_bytes().unwrap();
        let field = |b: &[u8]| match Checkpoint::from_bytes(b) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field(&bad), "magic");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(field(&bad), "schema_version");
        assert_eq!(field(&bytes[..bytes.len() - 100]), "payload");
        let mut bad = bytes.clone();
        bad[17] = b'#';
        assert_eq!(field(&bad), "header");
    }

    #[test]
    fn variant_guard() {
        let full = small(Variant::Full);
        let ckpt = Checkpoint::capture(&full, 0, None);
        let mut base = small(Variant::Baseline);
        match ckpt.restore_into(&mut base) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "config.variant"),
            other => panic!("{other:?}"),
        }
    }
}
