//! Steering vectors and the `.svec` file format.
//!
//! Layout: `SVEC`, version byte `0x01`, little-endian `u32` dimension,
//! little-endian `u32` metadata length, UTF-8 JSON metadata, then the payload
//! of `dim` little-endian `f32` values (or IEEE half floats when the
//! metadata sets `"half": true`).

use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{make_projection, InjectionSpec, ModelWeights};
use crate::tensor::Scalar;

pub const SVEC_MAGIC: &[u8; 4] = b"SVEC";
pub const SVEC_VERSION: u8 = 1;

/// An optimized latent offset and everything needed to replay it.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector {
    pub values: Vec<f32>,
    pub spec: InjectionSpec,
    pub model_fingerprint: u64,
    pub seed: u64,
    pub target_text: Option<String>,
}

impl SteeringVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn check_model<S: Scalar>(&self, weights: &ModelWeights<S>) -> Result<()> {
        let actual = weights.fingerprint();
        if actual != self.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.model_fingerprint,
                actual,
            });
        }
        self.spec.validate(&weights.config)?;
        if self.values.len() != self.spec.steer_dim {
            return Err(Error::Incompatible(format!(
                "vector has {} values but steer_dim is {}",
                self.values.len(),
                self.spec.steer_dim
            )));
        }
        Ok(())
    }

    /// `z · W_steer` in model width.
    pub fn up_projected(&self, d_model: usize) -> Result<Vec<f32>> {
        let proj = make_projection(self.spec.steer_dim, d_model, self.spec.projection_seed)?;
        proj.up_project(&self.values)
    }

    /// Same spec, same model, same dimension.
    pub fn compatible_with(&self, other: &SteeringVector) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Incompatible(format!(
                "injection specs differ: {} vs {}",
                self.spec.sites_label(),
                other.spec.sites_label()
            )));
        }
        if self.model_fingerprint != other.model_fingerprint {
            return Err(Error::Incompatible(format!(
                "model fingerprints differ: {:016x} vs {:016x}",
                self.model_fingerprint, other.model_fingerprint
            )));
        }
        if self.values.len() != other.values.len() {
            return Err(Error::Incompatible(format!(
                "dimensions differ: {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    spec: InjectionSpec,
    model_fingerprint: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_text: Option<String>,
    #[serde(default)]
    half: bool,
}

pub fn to_svec_bytes(v: &SteeringVector, half_precision: bool) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        spec: v.spec.clone(),
        model_fingerprint: format!("{:016x}", v.model_fingerprint),
        seed: v.seed,
        target_text: v.target_text.clone(),
        half: half_precision,
    })?;
    let mut out = Vec::with_capacity(13 + meta.len() + v.values.len() * 4);
    out.extend_from_slice(SVEC_MAGIC);
    out.push(SVEC_VERSION);
    out.extend_from_slice(&(v.values.len() as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for &x in &v.values {
        if half_precision {
            out.extend_from_slice(&f16::from_f32(x).to_le_bytes());
        } else {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parsed `.svec` contents plus the payload size in bytes.
pub fn from_svec_bytes(bytes: &[u8], path: &Path) -> Result<(SteeringVector, usize)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 13 || &bytes[..4] != SVEC_MAGIC {
        return Err(bad("missing SVEC magic".into()));
    }
    if bytes[4] != SVEC_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mlen = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let meta_end = 13usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated metadata".into()))?;
    let meta: Meta =
        serde_json::from_slice(&bytes[13..meta_end]).map_err(|e| bad(format!("metadata: {e}")))?;
    let width = if meta.half { 2 } else { 4 };
    let payload = &bytes[meta_end..];
    if payload.len() != dim * width {
        return Err(bad(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            dim * width
        )));
    }
    let values = if meta.half {
        payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let model_fingerprint = u64::from_str_radix(&meta.model_fingerprint, 16)
        .map_err(|_| bad("model_fingerprint is not hex".into()))?;
    Ok((
        SteeringVector {
            values,
            spec: meta.spec,
            model_fingerprint,
            seed: meta.seed,
            target_text: meta.target_text,
        },
        payload.len(),
    ))
}

pub fn save_svec(v: &SteeringVector, path: &Path, half_precision: bool) -> Result<()> {
    let bytes = to_svec_bytes(v, half_precision)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_svec(path: &Path) -> Result<SteeringVector> {
    Ok(load_svec_with_payload(path)?.0)
}

pub fn load_svec_with_payload(path: &Path) -> Result<(SteeringVector, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_svec_bytes(&bytes, path)
}
