use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use crate::error::Result;
use crate::extract::{extract, ExtractionHyper};
use crate::model::{Fnv1a, InjectionSpec, ModelWeights};
use crate::svec::{load_svec, save_svec, SteeringVector};

/// Extracted vectors keyed by a content hash of (model, text, spec, hyper),
/// held in memory and optionally mirrored as `.svec` files in a directory.
#[derive(Default)]
pub struct VectorCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<u64, SteeringVector>>,
}

impl VectorCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        VectorCache {
            dir: Some(dir.into()),
            mem: Mutex::default(),
        }
    }

    pub fn key(
        weights: &ModelWeights<f32>,
        text: &str,
        spec: &InjectionSpec,
        hyper: &ExtractionHyper,
    ) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&weights.fingerprint().to_le_bytes());
        h.write(&(text.len() as u64).to_le_bytes());
        h.write(text.as_bytes());
        h.write(serde_json::to_string(spec).unwrap_or_default().as_bytes());
        h.write(serde_json::to_string(hyper).unwrap_or_default().as_bytes());
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.mem.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_extract(
        &self,
        weights: &ModelWeights<f32>,
        text: &str,
        spec: &InjectionSpec,
        hyper: &ExtractionHyper,
    ) -> Result<SteeringVector> {
        let key = Self::key(weights, text, spec, hyper);
        if let Some(v) = self.mem.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let file = self.dir.as_ref().map(|d| d.join(format!("{key:016x}.svec")));
        if let Some(path) = file.as_ref().filter(|p| p.exists()) {
            let v = load_svec(path)?;
            if v.check_model(weights).is_ok() && &v.spec == spec && v.target_text.as_deref() == Some(text) {
                self.mem.lock().expect("cache lock").insert(key, v.clone());
                return Ok(v);
            }
        }
        let v = extract(weights, text, spec, hyper)?.vector;
        if let Some(path) = &file {
            if let Some(d) = &self.dir {
                std::fs::create_dir_all(d)
                    .map_err(|e| crate::Error::io(format!("creating {}", d.display()), e))?;
            }
            save_svec(&v, path, false)?;
        }
        self.mem.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }
}
