//! Steered greedy decoding, smoothed BLEU-4 and recovery scoring.

mod bleu;
mod decode;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu4_smoothed, bleu4_tokens, word_tokens};
pub use decode::{decodes_exactly, greedy_decode, Control, Decoded, DEFAULT_MAX_LEN};

use crate::error::Result;
use crate::model::ModelWeights;
use crate::svec::SteeringVector;
use crate::tokenizer::encode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub target: String,
    pub decoded: String,
    pub bleu4: f64,
    pub exact_match: bool,
    pub decoded_len: usize,
}

impl RecoveryReport {
    pub fn score(target: &str, decoded: &Decoded) -> Self {
        let text = decoded.text();
        let exact_match = decoded.ids[..] == encode(target).ids[1..];
        RecoveryReport {
            target: target.to_string(),
            bleu4: bleu4_smoothed(&text, target),
            decoded: text,
            exact_match,
            decoded_len: decoded.len(),
        }
    }
}

/// Decodes with `vector` and scores the output against `target`.
pub fn recovery_score(
    weights: &ModelWeights<f32>,
    vector: &SteeringVector,
    target: &str,
) -> Result<RecoveryReport> {
    vector.check_model(weights)?;
    let up = vector.up_projected(weights.config.d_model)?;
    let decoded = greedy_decode(
        weights,
        Control::Inject {
            vector: &up,
            spec: &vector.spec,
        },
        DEFAULT_MAX_LEN,
    )?;
    Ok(RecoveryReport::score(target, &decoded))
}
