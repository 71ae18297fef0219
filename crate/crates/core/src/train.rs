//! Next-token pretraining of the small decoder on a sentence-per-line corpus.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, save_checkpoint, ModelConfig, ModelWeights, ParamVars};
use crate::rng::SeededRng;
use crate::tensor::{AdamConfig, AdamState, Tape};
use crate::tokenizer::encode;

const BATCH_STREAM: u64 = 0x4241_5443;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus_path: PathBuf,
    pub batch_size: usize,
    pub context_length: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_out: Option<PathBuf>,
    #[serde(default)]
    pub trace_out: Option<PathBuf>,
    /// Linear warmup length; the rate then follows a cosine down to 10%.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_warmup() -> usize {
    100
}

fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(corpus_path: impl Into<PathBuf>) -> Self {
        TrainConfig {
            corpus_path: corpus_path.into(),
            batch_size: 16,
            context_length: 96,
            learning_rate: 3e-3,
            total_steps: 6000,
            seed: 0,
            checkpoint_out: None,
            trace_out: None,
            warmup_steps: default_warmup(),
            grad_clip: default_clip(),
            model: ModelConfig::default(),
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps.min(self.total_steps / 10).max(1);
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = (self.total_steps - warm).max(1) as f64;
        let progress = (step - warm) as f64 / span;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (0.1 + 0.9 * cosine)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub trace: LossTrace,
}

/// Non-empty lines of a UTF-8 corpus, trimmed.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
    let lines = split_lines(&text);
    if lines.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus {} has no sentences",
            path.display()
        )));
    }
    Ok(lines)
}

pub fn split_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Trains from `cfg.corpus_path`, writing the checkpoint and trace if asked.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let lines = read_corpus(&cfg.corpus_path)?;
    let out = train_on_lines(&lines, cfg)?;
    if let Some(path) = &cfg.checkpoint_out {
        save_checkpoint(&out.weights, path)?;
    }
    if let Some(path) = &cfg.trace_out {
        let js = serde_json::to_vec_pretty(&out.trace)?;
        fs::write(path, js).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(out)
}

/// Adam on mean next-token cross-entropy over windows of the concatenated,
/// BOS/EOS-framed lines. Every window starts at a sentence boundary so that
/// position 0 always holds BOS, as it does when decoding.
pub fn train_on_lines(lines: &[String], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    if lines.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.total_steps == 0 || cfg.context_length == 0 {
        return Err(Error::InvalidArgument("batch_size and total_steps must be positive".into()));
    }
    if cfg.context_length > cfg.model.max_positions {
        return Err(Error::Config(format!(
            "context_length {} exceeds max_positions {}",
            cfg.context_length, cfg.model.max_positions
        )));
    }
    let mut stream = Vec::new();
    let mut starts_at = Vec::with_capacity(lines.len());
    for l in lines {
        starts_at.push(stream.len());
        stream.extend(encode(l).ids.into_iter().map(|i| i as usize));
    }
    let ctx = cfg.context_length;
    // Windows begin at a sentence's BOS and wrap around the end of the corpus.
    let cycled: Vec<usize> = stream.iter().cycle().take(stream.len() + ctx + 1).copied().collect();
    let mut rng = SeededRng::derive(cfg.seed, BATCH_STREAM);
    let mut weights = ModelWeights::<f32>::init(&cfg.model)?;
    let mut states: Vec<AdamState<f32>> = weights
        .named_tensors()
        .iter()
        .map(|(_, t)| AdamState::new(t.numel(), AdamConfig::default()))
        .collect();
    let mut losses = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let starts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| starts_at[rng.below(starts_at.len())])
            .collect();
        let inputs: Vec<&[usize]> = starts.iter().map(|&o| &cycled[o..o + ctx]).collect();
        let targets: Vec<usize> = starts
            .iter()
            .flat_map(|&o| cycled[o + 1..o + ctx + 1].iter().copied())
            .collect();

        let (loss, mut grads) = {
            let mut tape = Tape::new();
            let p = ParamVars::bind(&mut tape, &weights, true);
            let logits = forward(&mut tape, &p, &weights.config, &inputs, None, None)?;
            let loss_var = tape.cross_entropy(logits, &targets)?;
            let loss = tape.value(loss_var)[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut g = tape.backward(loss_var)?;
            let grads: Vec<Vec<f32>> = p
                .all()
                .into_iter()
                .map(|v| g.take(v).map(|t| t.into_data()).ok_or(Error::MissingGradient))
                .collect::<Result<_>>()?;
            (loss, grads)
        };
        losses.push(loss);

        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            grads.iter_mut().flatten().for_each(|v| *v *= s);
        }
        let lr = cfg.lr_at(step);
        for ((t, st), g) in weights.tensors_mut().into_iter().zip(&mut states).zip(&grads) {
            st.step(t.data_mut(), Some(g), lr)?;
        }
    }
    Ok(TrainOutcome {
        weights,
        trace: LossTrace { losses },
    })
}

/// Mean per-token cross-entropy of each line scored independently.
pub fn mean_token_loss(weights: &ModelWeights<f32>, lines: &[String]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for line in lines {
        let ids = encode(line).ids_usize();
        let n = (ids.len() - 1).min(weights.config.max_positions);
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, weights, false);
        let logits = forward(&mut tape, &p, &weights.config, &[&ids[..n]], None, None)?;
        let loss = tape.cross_entropy(logits, &ids[1..n + 1])?;
        total += tape.value(loss)[0] as f64 * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            context_length: 21,
            learning_rate: 1e-2,
            total_steps: 500,
            warmup_steps: 20,
            model: ModelConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 2,
                d_ff: 64,
                max_positions: 32,
                ..ModelConfig::default()
            },
            ..TrainConfig::new("unused")
        }
    }

    #[test]
    fn overfits_a_single_sentence() {
        let lines = vec!["the quick brown fox.".to_string()];
        assert_eq!(lines[0].len(), 20);
        let out = train_on_lines(&lines, &small_cfg()).unwrap();
        let loss = mean_token_loss(&out.weights, &lines).unwrap();
        assert!(loss < 0.1, "per-token loss {loss}");
    }

    #[test]
    fn same_seed_same_weights() {
        let lines = vec!["abc def".to_string(), "ghi jkl mno".to_string()];
        let cfg = TrainConfig {
            total_steps: 5,
            context_length: 8,
            ..small_cfg()
        };
        let a = train_on_lines(&lines, &cfg).unwrap();
        let b = train_on_lines(&lines, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn unreadable_corpus_errors() {
        let cfg = TrainConfig::new("/nonexistent/corpus.txt");
        assert!(matches!(train(&cfg), Err(Error::Io { .. })));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            total_steps: 1000,
            warmup_steps: 100,
            learning_rate: 1.0,
            ..small_cfg()
        };
        assert!(cfg.lr_at(0) < cfg.lr_at(50));
        assert!((cfg.lr_at(100) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(1000) - 0.1).abs() < 1e-3);
    }
}
