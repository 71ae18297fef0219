use super::{InjectionSpec, ModelConfig, ModelWeights, Timesteps, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

pub struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    ln2_g: Var,
    ln2_b: Var,
    fc_w: Var,
    fc_b: Var,
    out_w: Var,
    out_b: Var,
}

/// Model weights bound as leaves of one tape.
pub struct ParamVars {
    wte: Var,
    wpe: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
}

impl ParamVars {
    /// Binds every weight tensor by reference; `trainable` marks them as
    /// differentiable.
    pub fn bind<'a, S: Scalar>(
        tape: &mut Tape<'a, S>,
        w: &'a ModelWeights<S>,
        trainable: bool,
    ) -> Self {
        let mut b = |t| tape.borrowed(t, trainable);
        let wte = b(&w.wte);
        let wpe = b(&w.wpe);
        let layers = w
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_g: b(&l.ln1_g),
                ln1_b: b(&l.ln1_b),
                qkv_w: b(&l.attn_qkv_w),
                qkv_b: b(&l.attn_qkv_b),
                proj_w: b(&l.attn_proj_w),
                proj_b: b(&l.attn_proj_b),
                ln2_g: b(&l.ln2_g),
                ln2_b: b(&l.ln2_b),
                fc_w: b(&l.mlp_fc_w),
                fc_b: b(&l.mlp_fc_b),
                out_w: b(&l.mlp_proj_w),
                out_b: b(&l.mlp_proj_b),
            })
            .collect();
        let lnf_g = b(&w.lnf_g);
        let lnf_b = b(&w.lnf_b);
        ParamVars {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
        }
    }

    /// Leaves in checkpoint directory order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.wte, self.wpe];
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.qkv_w, l.qkv_b, l.proj_w, l.proj_b, l.ln2_g, l.ln2_b, l.fc_w,
                l.fc_b, l.out_w, l.out_b,
            ]);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }
}

/// An up-projected (`[1, d_model]`) steering vector and where to add it.
pub struct Steer<'s> {
    pub vector: Var,
    pub spec: &'s InjectionSpec,
}

fn linear<S: Scalar>(tape: &mut Tape<'_, S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b, None)
}

fn inject<S: Scalar>(
    tape: &mut Tape<'_, S>,
    h: Var,
    steer: &Steer<'_>,
    batch: usize,
    len: usize,
) -> Result<Var> {
    match steer.spec.timesteps {
        Timesteps::All => tape.add_row(h, steer.vector, None),
        Timesteps::First => tape.add_row(h, steer.vector, Some((0..batch).map(|b| b * len).collect())),
    }
}

fn attention<S: Scalar>(
    tape: &mut Tape<'_, S>,
    cfg: &ModelConfig,
    l: &LayerVars,
    a: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let qkv = linear(tape, a, l.qkv_w, l.qkv_b)?;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let mut per_seq = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows = if batch == 1 {
            qkv
        } else {
            tape.slice(qkv, 0, b * len, len)?
        };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q = tape.slice(rows, 1, h * dh, dh)?;
            let q = tape.scale(q, scale);
            let k = tape.slice(rows, 1, d + h * dh, dh)?;
            let v = tape.slice(rows, 1, 2 * d + h * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let probs = tape.softmax(scores, true)?;
            heads.push(tape.matmul(probs, v)?);
        }
        per_seq.push(if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        });
    }
    let merged = if batch == 1 {
        per_seq[0]
    } else {
        tape.concat(&per_seq, 0)?
    };
    linear(tape, merged, l.proj_w, l.proj_b)
}

/// Final-layer hidden states (after the final norm and any LM-head
/// injection), shape `[batch * (prefix + T), d_model]`.
///
/// All sequences in `seqs` must share one length. `prefix` is an optional
/// `[k, d_model]` block of virtual input embeddings placed before the first
/// token (single sequence only).
pub fn hidden_states<S: Scalar>(
    tape: &mut Tape<'_, S>,
    p: &ParamVars,
    cfg: &ModelConfig,
    seqs: &[&[usize]],
    prefix: Option<Var>,
    steer: Option<&Steer<'_>>,
) -> Result<Var> {
    let batch = seqs.len();
    let t = seqs.first().map(|s| s.len()).unwrap_or(0);
    if batch == 0 || t == 0 {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }
    if seqs.iter().any(|s| s.len() != t) {
        return Err(Error::InvalidArgument("batch sequences differ in length".into()));
    }
    let k = match prefix {
        Some(pv) => {
            if batch != 1 {
                return Err(Error::InvalidArgument("prefix requires a single sequence".into()));
            }
            let s = tape.shape(pv);
            if s.len() != 2 || s[1] != cfg.d_model {
                return Err(Error::shape("prefix", format!("{s:?} vs width {}", cfg.d_model)));
            }
            s[0]
        }
        None => 0,
    };
    let len = k + t;
    if len > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_positions,
        });
    }
    if let Some(s) = steer {
        let n: usize = tape.shape(s.vector).iter().product();
        if n != cfg.d_model {
            return Err(Error::shape("steer", format!("{n} values vs width {}", cfg.d_model)));
        }
    }

    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let tok = tape.gather(p.wte, &ids)?;
    let tok = match prefix {
        Some(pv) => tape.concat(&[pv, tok], 0)?,
        None => tok,
    };
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let pos = tape.gather(p.wpe, &positions)?;
    let mut h = tape.add(tok, pos)?;
    if let Some(s) = steer.filter(|s| s.spec.at_embedding()) {
        h = inject(tape, h, s, batch, len)?;
    }

    for (i, l) in p.layers.iter().enumerate() {
        let a = tape.layer_norm(h, l.ln1_g, l.ln1_b, LAYER_NORM_EPS)?;
        let attn = attention(tape, cfg, l, a, batch, len)?;
        h = tape.add(h, attn)?;
        if let Some(s) = steer.filter(|s| s.spec.after_attn(i)) {
            h = inject(tape, h, s, batch, len)?;
        }
        let m = tape.layer_norm(h, l.ln2_g, l.ln2_b, LAYER_NORM_EPS)?;
        let f = linear(tape, m, l.fc_w, l.fc_b)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, l.out_w, l.out_b)?;
        h = tape.add(h, f)?;
        if let Some(s) = steer.filter(|s| s.spec.after_ff(i)) {
            h = inject(tape, h, s, batch, len)?;
        }
    }

    let mut out = tape.layer_norm(h, p.lnf_g, p.lnf_b, LAYER_NORM_EPS)?;
    if let Some(s) = steer.filter(|s| s.spec.at_lm_head()) {
        out = inject(tape, out, s, batch, len)?;
    }
    Ok(out)
}

/// Logits `[batch * (prefix + T), vocab]` through the tied output projection.
pub fn forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    p: &ParamVars,
    cfg: &ModelConfig,
    seqs: &[&[usize]],
    prefix: Option<Var>,
    steer: Option<&Steer<'_>>,
) -> Result<Var> {
    let h = hidden_states(tape, p, cfg, seqs, prefix, steer)?;
    let wte_t = tape.transpose(p.wte)?;
    tape.matmul(h, wte_t)
}

/// Argmax next token after `ids`, lowest id on ties.
pub fn greedy_next<S: Scalar>(
    tape: &mut Tape<'_, S>,
    p: &ParamVars,
    cfg: &ModelConfig,
    ids: &[usize],
    prefix: Option<Var>,
    steer: Option<&Steer<'_>>,
) -> Result<usize> {
    let h = hidden_states(tape, p, cfg, &[ids], prefix, steer)?;
    let rows = tape.shape(h)[0];
    let last = tape.slice(h, 0, rows - 1, 1)?;
    let wte_t = tape.transpose(p.wte)?;
    let logits = tape.matmul(last, wte_t)?;
    Ok(argmax_row(tape.value(logits)))
}

pub fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over positions of the final-layer hidden states.
pub fn mean_pool_hidden<S: Scalar>(weights: &ModelWeights<S>, ids: &[usize]) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, weights, false);
    let h = hidden_states(&mut tape, &p, &weights.config, &[ids], None, None)?;
    let d = weights.config.d_model;
    let vals = tape.value(h);
    let n = S::of(ids.len() as f64);
    Ok((0..d)
        .map(|c| (0..ids.len()).map(|r| vals[r * d + c]).sum::<S>() / n)
        .collect())
}
