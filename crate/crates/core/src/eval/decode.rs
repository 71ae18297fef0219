use crate::error::Result;
use crate::model::{greedy_next, InjectionSpec, ModelWeights, ParamVars, Steer};
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{lossy_text, BOS, EOS};

/// Paper-scale generation cap; clamped to the model's position budget.
pub const DEFAULT_MAX_LEN: usize = 1024;

/// What steers a decode.
#[derive(Clone, Copy, Debug)]
pub enum Control<'a> {
    Free,
    /// Model-width (already up-projected) vector added at `spec`'s sites.
    Inject {
        vector: &'a [f32],
        spec: &'a InjectionSpec,
    },
    /// `[k, d_model]` virtual embeddings placed before BOS.
    Prefix(&'a Tensor<f32>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids (without the leading BOS), including EOS when reached.
    pub ids: Vec<u32>,
    pub hit_eos: bool,
}

impl Decoded {
    pub fn text(&self) -> String {
        lossy_text(&self.ids)
    }

    /// Number of generated tokens, EOS included.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Greedy decoding from BOS: append the argmax token (lowest id on ties)
/// until EOS or `max_len` generated tokens.
pub fn greedy_decode(
    weights: &ModelWeights<f32>,
    control: Control<'_>,
    max_len: usize,
) -> Result<Decoded> {
    let cfg = &weights.config;
    let prefix_len = match control {
        Control::Prefix(p) => p.shape()[0],
        _ => 0,
    };
    let budget = cfg.max_positions.saturating_sub(prefix_len);
    let max_len = max_len.min(budget);
    let steer_tensor = match control {
        Control::Inject { vector, .. } => Some(Tensor::new(vec![1, vector.len()], vector.to_vec())?),
        _ => None,
    };
    let mut ids: Vec<usize> = vec![BOS as usize];
    let mut out = Vec::new();
    let mut hit_eos = false;
    while out.len() < max_len {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, weights, false);
        let prefix = match control {
            Control::Prefix(t) => Some(tape.constant(t)),
            _ => None,
        };
        let steer = match (control, &steer_tensor) {
            (Control::Inject { spec, .. }, Some(t)) => Some(Steer {
                vector: tape.constant(t),
                spec,
            }),
            _ => None,
        };
        let next = greedy_next(&mut tape, &p, cfg, &ids, prefix, steer.as_ref())?;
        out.push(next as u32);
        if next as u32 == EOS {
            hit_eos = true;
            break;
        }
        ids.push(next);
    }
    Ok(Decoded { ids: out, hit_eos })
}

/// Whether greedy decoding reproduces `target_ids` (BOS-framed, EOS-terminated)
/// exactly; stops at the first divergence.
pub fn decodes_exactly(
    weights: &ModelWeights<f32>,
    control: Control<'_>,
    target_ids: &[usize],
) -> Result<bool> {
    let cfg = &weights.config;
    let steer_tensor = match control {
        Control::Inject { vector, .. } => Some(Tensor::new(vec![1, vector.len()], vector.to_vec())?),
        _ => None,
    };
    for t in 1..target_ids.len() {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, weights, false);
        let prefix = match control {
            Control::Prefix(x) => Some(tape.constant(x)),
            _ => None,
        };
        let steer = match (control, &steer_tensor) {
            (Control::Inject { spec, .. }, Some(x)) => Some(Steer {
                vector: tape.constant(x),
                spec,
            }),
            _ => None,
        };
        let next = greedy_next(&mut tape, &p, cfg, &target_ids[..t], prefix, steer.as_ref())?;
        if next != target_ids[t] {
            return Ok(false);
        }
    }
    Ok(true)
}
