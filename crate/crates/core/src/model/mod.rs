//! GPT-style pre-LN causal decoder with steering-vector injection sites.

mod checkpoint;
mod forward;
mod injection;
mod projection;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::VOCAB_SIZE;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{argmax_row, forward, greedy_next, hidden_states, mean_pool_hidden, ParamVars, Steer};
pub use injection::{InjectionSite, InjectionSpec, Timesteps};
pub use projection::{make_projection, ProjectionMatrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 4 layers, width 64, 4 heads.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: VOCAB_SIZE,
            max_positions: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        // Smaller vocabularies are allowed for synthetic-id models; byte text
        // needs the full table and fails the embedding lookup otherwise.
        if !(2..=VOCAB_SIZE).contains(&self.vocab_size) {
            return bad(format!("vocab_size must be in 2..={VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Index of the middle layer, `ceil(n_layers / 2)` clamped into range.
    pub fn middle_layer(&self) -> usize {
        self.n_layers.div_ceil(2).min(self.n_layers - 1)
    }

    /// Parameter count implied by the architecture (LM head tied to `wte`).
    pub fn parameter_count(&self) -> usize {
        weight_shapes(self).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub attn_qkv_w: Tensor<S>,
    pub attn_qkv_b: Tensor<S>,
    pub attn_proj_w: Tensor<S>,
    pub attn_proj_b: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub mlp_fc_w: Tensor<S>,
    pub mlp_fc_b: Tensor<S>,
    pub mlp_proj_w: Tensor<S>,
    pub mlp_proj_b: Tensor<S>,
}

impl<S> LayerWeights<S> {
    fn fields(&self) -> [(&'static str, &Tensor<S>); 12] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.qkv.w", &self.attn_qkv_w),
            ("attn.qkv.b", &self.attn_qkv_b),
            ("attn.proj.w", &self.attn_proj_w),
            ("attn.proj.b", &self.attn_proj_b),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.fc.w", &self.mlp_fc_w),
            ("mlp.fc.b", &self.mlp_fc_b),
            ("mlp.proj.w", &self.mlp_proj_w),
            ("mlp.proj.b", &self.mlp_proj_b),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<S>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.attn_qkv_w,
            &mut self.attn_qkv_b,
            &mut self.attn_proj_w,
            &mut self.attn_proj_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.mlp_fc_w,
            &mut self.mlp_fc_b,
            &mut self.mlp_proj_w,
            &mut self.mlp_proj_b,
        ]
    }
}

/// Frozen decoder parameters. The LM head reuses `wte`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<S> {
    pub config: ModelConfig,
    pub wte: Tensor<S>,
    pub wpe: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub lnf_g: Tensor<S>,
    pub lnf_b: Tensor<S>,
}

/// Named shapes in directory order.
pub fn weight_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("wte".to_string(), vec![cfg.vocab_size, d]),
        ("wpe".to_string(), vec![cfg.max_positions, d]),
    ];
    for i in 0..cfg.n_layers {
        let layer: [(&str, Vec<usize>); 12] = [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.qkv.w", vec![d, 3 * d]),
            ("attn.qkv.b", vec![3 * d]),
            ("attn.proj.w", vec![d, d]),
            ("attn.proj.b", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("mlp.fc.w", vec![d, f]),
            ("mlp.fc.b", vec![f]),
            ("mlp.proj.w", vec![f, d]),
            ("mlp.proj.b", vec![d]),
        ];
        out.extend(layer.into_iter().map(|(n, s)| (format!("h{i}.{n}"), s)));
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out
}

impl<S: Scalar> ModelWeights<S> {
    /// Seeded initialization: N(0, 0.02) matrices and embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let named = weight_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".g") {
                    Tensor::full(&shape, S::one())
                } else if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| S::of(rng.normal() * INIT_STD))
                };
                (name, t)
            })
            .collect();
        Self::from_named(config.clone(), named)
    }

    /// Assembles weights from `(name, tensor)` pairs in directory order.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let expected = weight_shapes(&config);
        if named.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (en, es)) in named.iter().zip(&expected) {
            if name != en || t.shape() != es.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {name} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let mut it = named.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("count checked");
        let wte = next();
        let wpe = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: next(),
                ln1_b: next(),
                attn_qkv_w: next(),
                attn_qkv_b: next(),
                attn_proj_w: next(),
                attn_proj_b: next(),
                ln2_g: next(),
                ln2_b: next(),
                mlp_fc_w: next(),
                mlp_fc_b: next(),
                mlp_proj_w: next(),
                mlp_proj_b: next(),
            })
            .collect();
        let lnf_g = next();
        let lnf_b = next();
        Ok(ModelWeights {
            config,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.fields().into_iter().map(|(n, t)| (format!("h{i}.{n}"), t)));
        }
        out.push(("ln_f.g".to_string(), &self.lnf_g));
        out.push(("ln_f.b".to_string(), &self.lnf_b));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for l in self.layers.iter_mut() {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelWeights<T> {
        let named = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<T>()))
            .collect();
        ModelWeights::from_named(self.config.clone(), named).expect("same layout")
    }

    /// 64-bit FNV-1a over the little-endian `f32` payload in directory order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h.write(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finish()
    }
}

/// 64-bit FNV-1a hasher.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Fnv1a::new();
        h.write(bytes);
        h.finish()
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}
