//! Checkpoint files.
//!
//! Layout: 8-byte magic `LDAMCKPT`, `u32` version, `u32` header length, a
//! UTF-8 JSON header (architecture, tensor table, metadata), then raw
//! little-endian `f32` payloads at the offsets listed in the tensor table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LdamError, Result};
use crate::model::{Checkpoint, CheckpointMeta, ModelArch};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ModelArch,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: usize,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let names = ckpt.arch.param_names();
    let mut tensors = Vec::with_capacity(names.len());
    let mut offset = 0;
    for (name, t) in names.into_iter().zip(ckpt.params.iter().flatten()) {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 4;
    }
    let header = serde_json::to_vec(&Header {
        arch: ckpt.arch.clone(),
        tensors,
        meta: ckpt.meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in ckpt.params.iter().flatten() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(LdamError::Checkpoint("bad magic: not an LDAM checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(LdamError::Checkpoint(format!(
            "version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| LdamError::Checkpoint("header truncated".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| LdamError::Checkpoint(format!("header JSON: {e}")))?;
    let payload = &bytes[16 + hlen..];

    let names = header.arch.param_names();
    let expected_shapes: Vec<Vec<usize>> = header
        .arch
        .layers
        .iter()
        .flat_map(|l| l.param_shapes())
        .collect();
    if header.tensors.len() != names.len() {
        return Err(LdamError::Checkpoint(format!(
            "{} tensors listed, architecture needs {}",
            header.tensors.len(),
            names.len()
        )));
    }
    let mut flat = Vec::with_capacity(names.len());
    let mut end = 0;
    for ((entry, name), shape) in header.tensors.iter().zip(&names).zip(&expected_shapes) {
        if &entry.name != name || &entry.shape != shape {
            return Err(LdamError::CheckpointTensor {
                name: entry.name.clone(),
                reason: format!("expected `{name}` with shape {shape:?}, found {:?}", entry.shape),
            });
        }
        let n: usize = shape.iter().product();
        let raw = payload
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| LdamError::CheckpointTensor {
                name: entry.name.clone(),
                reason: format!(
                    "payload needs bytes {}..{}, only {} present",
                    entry.offset,
                    entry.offset + 4 * n,
                    payload.len()
                ),
            })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        flat.push(Tensor::new(shape.clone(), data)?);
        end = end.max(entry.offset + 4 * n);
    }
    if end != payload.len() {
        let last = header.tensors.last().map(|t| t.name.clone()).unwrap_or_default();
        return Err(LdamError::CheckpointTensor {
            name: last,
            reason: format!("{} unexpected trailing payload bytes", payload.len() - end),
        });
    }

    let mut it = flat.into_iter();
    let params = header
        .arch
        .layers
        .iter()
        .map(|l| (0..l.param_shapes().len()).map(|_| it.next().expect("counted")).collect())
        .collect();
    Checkpoint::new(header.arch, params, header.meta)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    // write then rename so readers never observe a partial file
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, encode_checkpoint(ckpt)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_discriminator, build_lenet};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_lenet(3);
        m.meta.accuracy = Some(0.987654321);
        m.meta.optimizer = "rmsprop".into();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), first);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut b = encode_checkpoint(&build_discriminator(0)).unwrap();
        let mut wrong = b.clone();
        wrong[..4].copy_from_slice(b"LDAX");
        assert!(matches!(decode_checkpoint(&wrong), Err(LdamError::Checkpoint(_))));
        b[8] = 7;
        let err = decode_checkpoint(&b).unwrap_err();
        assert!(err.to_string().contains("version 7"));
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let b = encode_checkpoint(&build_lenet(0)).unwrap();
        let err = decode_checkpoint(&b[..b.len() - 8]).unwrap_err();
        match err {
            LdamError::CheckpointTensor { name, .. } => assert_eq!(name, "layer10.bias"),
            other => panic!("unexpected {other}"),
        }
    }
}
