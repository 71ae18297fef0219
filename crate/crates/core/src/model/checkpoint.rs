//! `.lmck` checkpoints: `LMCK1`, a little-endian `u32` header length, a JSON
//! header (config, tensor directory, FNV-1a fingerprint of the payload), then
//! raw little-endian `f32` tensors in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Fnv1a, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LMCK1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<DirEntry>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

pub fn save_checkpoint(weights: &ModelWeights<f32>, path: &Path) -> Result<u64> {
    let mut payload = Vec::with_capacity(weights.parameter_count() * 4);
    let mut tensors = Vec::new();
    for (name, t) in weights.named_tensors() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(DirEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            bytes: payload.len() as u64 - offset,
        });
    }
    let fingerprint = Fnv1a::hash(&payload);
    let header = serde_json::to_vec(&Header {
        config: weights.config.clone(),
        tensors,
        fingerprint: format!("{fingerprint:016x}"),
    })?;
    let mut out = Vec::with_capacity(9 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(fingerprint)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("missing LMCK1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header_end = 9usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[9..header_end])
        .map_err(|e| bad(&format!("header JSON: {e}")))?;
    let payload = &bytes[header_end..];
    let expected_fp = u64::from_str_radix(&header.fingerprint, 16)
        .map_err(|_| bad("fingerprint is not hex"))?;
    let total: u64 = header.tensors.iter().map(|t| t.bytes).sum();
    if total != payload.len() as u64 {
        return Err(bad(&format!(
            "payload is {} bytes, directory describes {total}",
            payload.len()
        )));
    }
    if Fnv1a::hash(payload) != expected_fp {
        return Err(bad("payload fingerprint mismatch"));
    }
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
        if e.bytes as usize != numel * 4 || end > payload.len() {
            return Err(bad(&format!("tensor {} has inconsistent extent", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((e.name, Tensor::new(e.shape, data)?));
    }
    let w = ModelWeights::from_named(header.config, named)?;
    debug_assert_eq!(w.fingerprint(), expected_fp);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelWeights<f32> {
        ModelWeights::init(&ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_positions: 12,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lmck");
        let w = small();
        let fp = save_checkpoint(&w, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(fp, w.fingerprint());
        assert_eq!(back.fingerprint(), fp);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lmck");
        save_checkpoint(&small(), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut magic = good.clone();
        magic[4] = b'2';
        fs::write(&path, &magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let mut header = good.clone();
        header[10] ^= 0x55;
        fs::write(&path, &header).unwrap();
        assert!(load_checkpoint(&path).is_err());

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut payload = good.clone();
        let n = payload.len();
        payload[n - 1] ^= 1;
        fs::write(&path, &payload).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
