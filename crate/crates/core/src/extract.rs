//! Steering-vector extraction: optimize a latent vector so that the frozen
//! decoder, with the vector injected, greedily emits a target sentence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{decodes_exactly, greedy_decode, Control, RecoveryReport, DEFAULT_MAX_LEN};
use crate::model::{argmax_row, forward, make_projection, InjectionSpec, ModelWeights, ParamVars, Steer};
use crate::rng::SeededRng;
use crate::svec::SteeringVector;
use crate::tensor::{AdamConfig, AdamState, PlateauScheduler, Scalar, Tape, Tensor};
use crate::tokenizer::encode;

const INIT_STREAM: u64 = 0x5841_5649;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionHyper {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub patience: u32,
    /// Greedy-decode exact-match check interval; 0 disables early stopping.
    pub early_stop_check_every: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl ExtractionHyper {
    /// Defaults for `spec`: lr 1.0 for a single in-stack site, else 0.01.
    pub fn for_spec(spec: &InjectionSpec, seed: u64) -> Self {
        ExtractionHyper {
            max_steps: 500,
            learning_rate: default_learning_rate(spec),
            decay_factor: 0.9,
            patience: 1,
            early_stop_check_every: 25,
            seed,
            adam: AdamConfig::default(),
        }
    }
}

pub fn default_learning_rate(spec: &InjectionSpec) -> f64 {
    if spec.is_single_in_stack() {
        1.0
    } else {
        0.01
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionReport {
    pub vector: SteeringVector,
    pub final_loss: f64,
    pub steps_used: usize,
    pub loss_trace: Vec<f64>,
    pub recovery: RecoveryReport,
}

impl ExtractionReport {
    pub fn recovered_bleu4(&self) -> f64 {
        self.recovery.bleu4
    }

    pub fn exact_match(&self) -> bool {
        self.recovery.exact_match
    }
}

/// Xavier-normal draw for a `[rows, cols]` parameter.
pub fn xavier_normal(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let mut rng = SeededRng::derive(seed, INIT_STREAM);
    (0..rows * cols).map(|_| (rng.normal() * std) as f32).collect()
}

/// What is being optimized.
enum Mode<'a, S: Scalar> {
    Inject {
        spec: &'a InjectionSpec,
        projection: Option<Tensor<S>>,
    },
    Prefix {
        k: usize,
    },
}

struct Eval<S> {
    loss: f64,
    grad: Option<Vec<S>>,
    teacher_forced_match: bool,
}

fn evaluate<S: Scalar>(
    weights: &ModelWeights<S>,
    ids: &[usize],
    mode: &Mode<'_, S>,
    param: &[S],
    want_grad: bool,
) -> Result<Eval<S>> {
    let cfg = &weights.config;
    let n = ids.len() - 1;
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, weights, false);
    let (logits, leaf, skip) = match mode {
        Mode::Inject { spec, projection } => {
            let z = tape.leaf(Tensor::new(vec![1, param.len()], param.to_vec())?, want_grad);
            let vector = match projection {
                Some(w) => {
                    let w = tape.leaf(w.clone(), false);
                    tape.matmul(z, w)?
                }
                None => z,
            };
            let steer = Steer { vector, spec };
            (forward(&mut tape, &p, cfg, &[&ids[..n]], None, Some(&steer))?, z, 0)
        }
        Mode::Prefix { k } => {
            let x = tape.leaf(Tensor::new(vec![*k, cfg.d_model], param.to_vec())?, want_grad);
            (forward(&mut tape, &p, cfg, &[&ids[..n]], Some(x), None)?, x, *k)
        }
    };
    let logits = if skip > 0 {
        tape.slice(logits, 0, skip, n)?
    } else {
        logits
    };
    let v = cfg.vocab_size;
    let teacher_forced_match = tape
        .value(logits)
        .chunks(v)
        .zip(&ids[1..])
        .all(|(row, &t)| argmax_row(row) == t);
    let loss = tape.cross_entropy(logits, &ids[1..])?;
    let loss_val = tape.value(loss)[0].as_f64();
    let grad = if want_grad {
        let mut g = tape.backward(loss)?;
        Some(g.take(leaf).ok_or(Error::MissingGradient)?.into_data())
    } else {
        None
    };
    Ok(Eval {
        loss: loss_val,
        grad,
        teacher_forced_match,
    })
}

fn framed_ids(sentence: &str, max_positions: usize) -> Result<Vec<usize>> {
    if sentence.is_empty() {
        return Err(Error::InvalidArgument("target sentence is empty".into()));
    }
    let ids = encode(sentence).ids_usize();
    if ids.len() - 1 > max_positions {
        return Err(Error::SequenceTooLong {
            len: ids.len() - 1,
            max: max_positions,
        });
    }
    Ok(ids)
}

/// Mean teacher-forced cross-entropy of `[bytes…, EOS]` given `[BOS, bytes…]`
/// with `z` injected per `spec`, and its gradient with respect to `z`.
pub fn steering_loss_and_grad<S: Scalar>(
    weights: &ModelWeights<S>,
    sentence: &str,
    spec: &InjectionSpec,
    z: &[S],
) -> Result<(f64, Vec<S>)> {
    let ids = framed_ids(sentence, weights.config.max_positions)?;
    steering_loss_and_grad_ids(weights, &ids, spec, z)
}

/// As [`steering_loss_and_grad`] for an explicit id sequence: `ids[..n-1]`
/// is fed and `ids[1..]` is predicted.
pub fn steering_loss_and_grad_ids<S: Scalar>(
    weights: &ModelWeights<S>,
    ids: &[usize],
    spec: &InjectionSpec,
    z: &[S],
) -> Result<(f64, Vec<S>)> {
    spec.validate(&weights.config)?;
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("need at least one input and one target".into()));
    }
    if z.len() != spec.steer_dim {
        return Err(Error::Incompatible(format!(
            "vector has {} values but steer_dim is {}",
            z.len(),
            spec.steer_dim
        )));
    }
    let mode = inject_mode(spec, weights.config.d_model)?;
    let e = evaluate(weights, ids, &mode, z, true)?;
    Ok((e.loss, e.grad.ok_or(Error::MissingGradient)?))
}

fn inject_mode<S: Scalar>(spec: &InjectionSpec, d_model: usize) -> Result<Mode<'_, S>> {
    let proj = make_projection(spec.steer_dim, d_model, spec.projection_seed)?;
    Ok(Mode::Inject {
        spec,
        projection: (!proj.is_identity()).then(|| proj.matrix()),
    })
}

struct Optimized {
    param: Vec<f32>,
    final_loss: f64,
    steps_used: usize,
    loss_trace: Vec<f64>,
    exact: bool,
}

fn optimize(
    weights: &ModelWeights<f32>,
    ids: &[usize],
    mode: &Mode<'_, f32>,
    mut param: Vec<f32>,
    hyper: &ExtractionHyper,
    confirm: impl Fn(&[f32]) -> Result<bool>,
) -> Result<Optimized> {
    let mut adam = AdamState::new(param.len(), hyper.adam);
    let mut sched = PlateauScheduler::new(hyper.learning_rate, hyper.decay_factor, hyper.patience);
    let mut trace = Vec::with_capacity(hyper.max_steps);
    for step in 0..hyper.max_steps {
        let e = evaluate(weights, ids, mode, &param, true)?;
        if !e.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(e.loss);
        let check = hyper.early_stop_check_every;
        if check > 0 && step % check == 0 && e.teacher_forced_match && confirm(&param)? {
            return Ok(Optimized {
                param,
                final_loss: e.loss,
                steps_used: step,
                loss_trace: trace,
                exact: true,
            });
        }
        let lr = sched.current_lr;
        adam.step(&mut param, e.grad.as_deref(), lr)?;
        sched.observe(e.loss);
    }
    let e = evaluate(weights, ids, mode, &param, false)?;
    if !e.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: hyper.max_steps,
        });
    }
    Ok(Optimized {
        param,
        final_loss: e.loss,
        steps_used: hyper.max_steps,
        loss_trace: trace,
        exact: false,
    })
}

/// Optimizes a steering vector for `sentence` against the frozen `weights`.
pub fn extract(
    weights: &ModelWeights<f32>,
    sentence: &str,
    spec: &InjectionSpec,
    hyper: &ExtractionHyper,
) -> Result<ExtractionReport> {
    spec.validate(&weights.config)?;
    let ids = framed_ids(sentence, weights.config.max_positions)?;
    let d = weights.config.d_model;
    let proj = make_projection(spec.steer_dim, d, spec.projection_seed)?;
    let mode = inject_mode(spec, d)?;
    let init = xavier_normal(1, spec.steer_dim, hyper.seed);
    let confirm = |z: &[f32]| {
        let up = proj.up_project(z)?;
        decodes_exactly(weights, Control::Inject { vector: &up, spec }, &ids)
    };
    let opt = optimize(weights, &ids, &mode, init, hyper, confirm)?;

    let decoded = if opt.exact {
        crate::eval::Decoded {
            ids: ids[1..].iter().map(|&i| i as u32).collect(),
            hit_eos: true,
        }
    } else {
        let up = proj.up_project(&opt.param)?;
        greedy_decode(weights, Control::Inject { vector: &up, spec }, DEFAULT_MAX_LEN)?
    };
    Ok(ExtractionReport {
        vector: SteeringVector {
            values: opt.param,
            spec: spec.clone(),
            model_fingerprint: weights.fingerprint(),
            seed: hyper.seed,
            target_text: Some(sentence.to_string()),
        },
        final_loss: opt.final_loss,
        steps_used: opt.steps_used,
        loss_trace: opt.loss_trace,
        recovery: RecoveryReport::score(sentence, &decoded),
    })
}

/// `n_seeds` independent extractions with seeds `hyper.seed, hyper.seed + 1, …`.
pub fn extract_multi_seed(
    weights: &ModelWeights<f32>,
    sentence: &str,
    spec: &InjectionSpec,
    hyper: &ExtractionHyper,
    n_seeds: usize,
) -> Result<Vec<ExtractionReport>> {
    if n_seeds == 0 {
        return Err(Error::InvalidArgument("n_seeds must be at least 1".into()));
    }
    (0..n_seeds as u64)
        .map(|i| {
            let h = ExtractionHyper {
                seed: hyper.seed.wrapping_add(i),
                ..hyper.clone()
            };
            extract(weights, sentence, spec, &h)
        })
        .collect()
}

/// Elementwise mean of vectors sharing spec, model and dimension.
pub fn mean_vector(vectors: &[&SteeringVector]) -> Result<SteeringVector> {
    let first = *vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of zero vectors".into()))?;
    for v in &vectors[1..] {
        first.compatible_with(v)?;
    }
    let n = vectors.len() as f64;
    let values = (0..first.dim())
        .map(|i| (vectors.iter().map(|v| v.values[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    let same_target = vectors.iter().all(|v| v.target_text == first.target_text);
    Ok(SteeringVector {
        values,
        spec: first.spec.clone(),
        model_fingerprint: first.model_fingerprint,
        seed: first.seed,
        target_text: if same_target {
            first.target_text.clone()
        } else {
            None
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixReport {
    pub prefix: Tensor<f32>,
    pub final_loss: f64,
    pub steps_used: usize,
    pub recovery: RecoveryReport,
}

/// Optimizes `k` virtual input embeddings placed before BOS instead of a
/// hidden-state injection.
pub fn extract_prefix(
    weights: &ModelWeights<f32>,
    sentence: &str,
    k: usize,
    hyper: &ExtractionHyper,
) -> Result<PrefixReport> {
    let cfg = &weights.config;
    if k == 0 {
        return Err(Error::InvalidArgument("prefix length must be positive".into()));
    }
    let ids = framed_ids(sentence, cfg.max_positions.saturating_sub(k))?;
    let mode = Mode::Prefix { k };
    let init = xavier_normal(k, cfg.d_model, hyper.seed);
    let confirm = |x: &[f32]| {
        let t = Tensor::new(vec![k, cfg.d_model], x.to_vec())?;
        decodes_exactly(weights, Control::Prefix(&t), &ids)
    };
    let opt = optimize(weights, &ids, &mode, init, hyper, confirm)?;
    let prefix = Tensor::new(vec![k, cfg.d_model], opt.param)?;
    let decoded = greedy_decode(weights, Control::Prefix(&prefix), DEFAULT_MAX_LEN)?;
    Ok(PrefixReport {
        final_loss: opt.final_loss,
        steps_used: opt.steps_used,
        recovery: RecoveryReport::score(sentence, &decoded),
        prefix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InjectionSite, ModelConfig, Timesteps};

    fn tiny() -> ModelWeights<f32> {
        ModelWeights::init(&ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_positions: 48,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn mid_all(d: usize) -> InjectionSpec {
        InjectionSpec::single(InjectionSite::AfterSelfAttn(1), Timesteps::All, d)
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let w = tiny();
        let spec = mid_all(16);
        let hyper = ExtractionHyper {
            max_steps: 0,
            ..ExtractionHyper::for_spec(&spec, 9)
        };
        let r = extract(&w, "hi there", &spec, &hyper).unwrap();
        assert_eq!(r.vector.values, xavier_normal(1, 16, 9));
        assert_eq!(r.steps_used, 0);
        assert!(r.loss_trace.is_empty());
    }

    #[test]
    fn xavier_spread_matches_fan_sum() {
        let v = xavier_normal(1, 4000, 1);
        let var = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / v.len() as f64;
        let expected = 2.0 / 4001.0;
        assert!((var / expected - 1.0).abs() < 0.08, "{var} vs {expected}");
    }

    #[test]
    fn learning_rate_policy() {
        assert_eq!(default_learning_rate(&mid_all(16)), 1.0);
        let emb = InjectionSpec::single(InjectionSite::Embedding, Timesteps::All, 16);
        assert_eq!(default_learning_rate(&emb), 0.01);
        let every = InjectionSpec::single(InjectionSite::EveryLayerAttn, Timesteps::All, 16);
        assert_eq!(default_learning_rate(&every), 0.01);
    }

    #[test]
    fn weights_stay_frozen_and_runs_repeat() {
        let w = tiny();
        let before = w.fingerprint();
        let spec = mid_all(16);
        let hyper = ExtractionHyper {
            max_steps: 30,
            ..ExtractionHyper::for_spec(&spec, 4)
        };
        let a = extract(&w, "abc", &spec, &hyper).unwrap();
        let b = extract(&w, "abc", &spec, &hyper).unwrap();
        assert_eq!(w.fingerprint(), before);
        assert_eq!(a, b);
        assert_eq!(a.vector.model_fingerprint, before);
    }

    #[test]
    fn loss_goes_down() {
        let w = tiny();
        let spec = mid_all(16);
        let hyper = ExtractionHyper {
            max_steps: 60,
            early_stop_check_every: 0,
            ..ExtractionHyper::for_spec(&spec, 0)
        };
        let r = extract(&w, "a cat sat.", &spec, &hyper).unwrap();
        assert!(r.final_loss < r.loss_trace[0] - 0.05, "{:?}", r.loss_trace);
    }

    #[test]
    fn too_long_and_empty_targets_error() {
        let w = tiny();
        let spec = mid_all(16);
        let hyper = ExtractionHyper::for_spec(&spec, 0);
        let long = "x".repeat(60);
        assert!(matches!(
            extract(&w, &long, &spec, &hyper),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(extract(&w, "", &spec, &hyper).is_err());
    }

    #[test]
    fn multi_seed_one_equals_single() {
        let w = tiny();
        let spec = mid_all(8);
        let hyper = ExtractionHyper {
            max_steps: 5,
            ..ExtractionHyper::for_spec(&spec, 11)
        };
        let single = extract(&w, "ok", &spec, &hyper).unwrap();
        let multi = extract_multi_seed(&w, "ok", &spec, &hyper, 1).unwrap();
        assert_eq!(multi, vec![single]);
        assert!(extract_multi_seed(&w, "ok", &spec, &hyper, 0).is_err());
    }

    fn sv(values: Vec<f32>, spec: InjectionSpec) -> SteeringVector {
        SteeringVector {
            values,
            spec,
            model_fingerprint: 1,
            seed: 0,
            target_text: None,
        }
    }

    #[test]
    fn mean_vector_cases() {
        let z = sv(vec![0.1, -3.7, 1e-3, 2.5], mid_all(4));
        let m = mean_vector(&[&z, &z, &z]).unwrap();
        assert_eq!(m.values, z.values);

        let neg = sv(z.values.iter().map(|v| -v).collect(), mid_all(4));
        let m = mean_vector(&[&z, &neg]).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));

        let other = sv(vec![0.0; 4], InjectionSpec::single(InjectionSite::Embedding, Timesteps::All, 4));
        assert!(matches!(mean_vector(&[&z, &other]), Err(Error::Incompatible(_))));
        assert!(mean_vector(&[]).is_err());
    }

    #[test]
    fn prefix_extraction_runs() {
        let w = tiny();
        let spec = mid_all(16);
        let hyper = ExtractionHyper {
            max_steps: 10,
            learning_rate: 0.01,
            ..ExtractionHyper::for_spec(&spec, 0)
        };
        let r = extract_prefix(&w, "hey", 1, &hyper).unwrap();
        assert_eq!(r.prefix.shape(), &[1, 16]);
        assert!(r.final_loss.is_finite());
    }
}
