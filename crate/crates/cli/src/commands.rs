use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};
use steervec::eval::{greedy_decode, recovery_score, Control};
use steervec::extract::extract;
use steervec::harness::transfer::{transfer_one, TransferOutput};
use steervec::harness::{
    self, make_gibberish_fold, make_shuffled_fold, par, sample_sentences, Classifier,
    LabeledOutputs, LexiconClassifier, Sentiment, StyleSets, VectorCache, LAMBDA_GRID,
};
use steervec::latent::{compute_offset, gaussian_sample, interpolate, pca_2d, recovery_radius};
use steervec::model::{load_checkpoint, InjectionSite, ModelWeights, Timesteps};
use steervec::svec::{load_svec, save_svec, SteeringVector};
use steervec::train::{read_corpus, train, TrainConfig};

use crate::options::*;

struct Ctx {
    file: FileConfig,
    res: Resolved,
}

pub fn run(cli: Cli) -> Result<Value> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let res = Resolved::new(cli.seed, cli.workers, &file)?;
    let ctx = Ctx { file, res };
    let workers = ctx.res.workers;
    let mut manifest = par::with_workers(workers, || dispatch(&ctx, cli.command))??;
    if let Value::Object(m) = &mut manifest {
        m.entry("seed").or_insert(json!(ctx.res.seed));
        m.insert("workers".into(), json!(workers));
    }
    Ok(manifest)
}

fn dispatch(ctx: &Ctx, command: Command) -> Result<Value> {
    match command {
        Command::Train(a) => cmd_train(ctx, a),
        Command::Extract(a) => cmd_extract(ctx, a),
        Command::Decode(a) => cmd_decode(a),
        Command::Recover(a) => cmd_recover(a),
        Command::Sweep(a) => cmd_sweep(ctx, a),
        Command::Transfer(a) => cmd_transfer(ctx, a),
        Command::Similarity(a) => cmd_similarity(ctx, a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Sample(a) => cmd_sample(ctx, a),
        Command::Radius(a) => cmd_radius(ctx, a),
        Command::Memorize(a) => cmd_memorize(ctx, a),
        Command::Cluster(a) => cmd_cluster(ctx, a),
        Command::Storage(a) => cmd_storage(a),
    }
}

fn model(path: &Path) -> Result<ModelWeights<f32>> {
    load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))
}

fn vector(path: &Path) -> Result<SteeringVector> {
    load_svec(path).with_context(|| format!("loading vector {}", path.display()))
}

fn decode_vector(weights: &ModelWeights<f32>, v: &SteeringVector, max_len: usize) -> Result<String> {
    v.check_model(weights)?;
    let up = v.up_projected(weights.config.d_model)?;
    let d = greedy_decode(weights, Control::Inject { vector: &up, spec: &v.spec }, max_len)?;
    Ok(d.text())
}

fn target_of(text: Option<String>, v: &SteeringVector) -> Result<String> {
    text.or_else(|| v.target_text.clone())
        .ok_or_else(|| usage("no --text given and the vector stores no target text"))
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<Value> {
    let mut cfg = match (&ctx.file.train, &a.corpus) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => TrainConfig::new(p),
        (None, None) => return Err(usage("train needs --corpus or a `train` section in --config")),
    };
    if let Some(p) = a.corpus {
        cfg.corpus_path = p;
    }
    if let Some(m) = &ctx.file.model {
        cfg.model = m.clone();
    }
    cfg.seed = ctx.res.explicit_seed.unwrap_or(cfg.seed);
    cfg.total_steps = a.steps.unwrap_or(cfg.total_steps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.context_length = a.context_length.unwrap_or(cfg.context_length);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.checkpoint_out = a.out.or(cfg.checkpoint_out);
    cfg.trace_out = a.trace.or(cfg.trace_out);
    if cfg.checkpoint_out.is_none() {
        return Err(usage("train needs --out"));
    }
    let out = train(&cfg)?;
    let losses = &out.trace.losses;
    Ok(json!({
        "command": "train",
        "seed": cfg.seed,
        "config": cfg,
        "fingerprint": format!("{:016x}", out.weights.fingerprint()),
        "first_loss": losses.first(),
        "final_loss": losses.last(),
    }))
}

fn cmd_extract(ctx: &Ctx, a: ExtractCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let spec = resolve_spec(&a.extraction, &ctx.file, &w.config)?;
    let hyper = ctx.res.hyper_with(&a.extraction).for_spec(&spec);
    let r = extract(&w, &a.text, &spec, &hyper)?;
    save_svec(&r.vector, &a.out, a.half)?;
    Ok(json!({
        "command": "extract",
        "spec": spec,
        "hyper": hyper,
        "steps_used": r.steps_used,
        "final_loss": r.final_loss,
        "recovery": r.recovery,
        "vector": a.out,
        "half_precision": a.half,
    }))
}

fn cmd_decode(a: DecodeCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let v = vector(&a.vector)?;
    let text = decode_vector(&w, &v, a.max_len)?;
    Ok(json!({ "command": "decode", "spec": v.spec, "text": text }))
}

fn cmd_recover(a: RecoverCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let v = vector(&a.vector)?;
    let target = target_of(a.text, &v)?;
    let r = recovery_score(&w, &v, &target)?;
    Ok(json!({ "command": "recover", "recovery": r }))
}

fn sentences(corpus: &Path, lo: usize, hi: usize, n: usize, seed: u64) -> Result<Vec<String>> {
    let lines = read_corpus(corpus)?;
    Ok(sample_sentences(&lines, lo, hi, n, seed)?)
}

fn default_site_grid(n_layers: usize) -> Vec<Vec<InjectionSite>> {
    let mut grid = vec![vec![InjectionSite::Embedding]];
    grid.extend((0..n_layers).map(|i| vec![InjectionSite::AfterSelfAttn(i)]));
    grid.extend((0..n_layers).map(|i| vec![InjectionSite::AfterFeedForward(i)]));
    grid.push(vec![InjectionSite::EveryLayerAttn]);
    grid.push(vec![InjectionSite::EveryLayerFF]);
    grid.push(vec![InjectionSite::LmHead]);
    grid
}

fn cmd_sweep(ctx: &Ctx, a: SweepCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let cfg = &w.config;
    let sents = sentences(&a.corpus, a.min_tokens, a.max_tokens, a.sentences, ctx.res.seed)?;
    let hyper = ctx.res.hyper_with(&a.extraction);
    let table = match a.kind {
        SweepKind::Injection => {
            let grid = if a.grid_sites.is_empty() {
                default_site_grid(cfg.n_layers)
            } else {
                a.grid_sites.iter().map(|s| parse_sites(s)).collect::<Result<_>>()?
            };
            let ts: Vec<Timesteps> = a.grid_timesteps.iter().map(|&t| t.into()).collect();
            let dim = a.extraction.dim.or(ctx.file.steer_dim).unwrap_or(cfg.d_model);
            harness::run_injection_sweep(&w, &sents, &grid, &ts, dim, &hyper)?
        }
        SweepKind::Dimension => {
            let spec = resolve_spec(&a.extraction, &ctx.file, cfg)?;
            let dims = if a.dims.is_empty() { harness::default_dims(cfg.d_model) } else { a.dims };
            if let Some(&d) = dims.iter().find(|&&d| d == 0 || d > cfg.d_model) {
                return Err(usage(format!("dimension {d} outside 1..={}", cfg.d_model)));
            }
            harness::run_dimension_sweep(&w, &sents, &spec.sites, spec.timesteps, &dims, &hyper)?
        }
        SweepKind::Prompt => harness::run_prompt_baseline(&w, &sents, &a.ks, &hyper)?,
    };
    if let Some(csv) = &a.csv {
        table.write(csv, a.json.as_deref())?;
    } else if let Some(j) = &a.json {
        std::fs::write(j, serde_json::to_string_pretty(&table)?)
            .with_context(|| format!("writing {}", j.display()))?;
    }
    let cells: Vec<Value> = table
        .cells
        .iter()
        .map(|c| json!({ "cell": c.cell, "n": c.n, "mean_bleu4": c.mean_bleu4, "exact_rate": c.exact_rate }))
        .collect();
    Ok(json!({
        "command": "sweep",
        "kind": a.kind,
        "hyper": hyper,
        "sentences": sents,
        "cells": cells,
        "csv": a.csv,
        "json": a.json,
    }))
}

fn classifier(labels: Option<&Path>) -> Result<Box<dyn Classifier>> {
    Ok(match labels {
        Some(p) => Box::new(LabeledOutputs::load(p)?),
        None => Box::new(LexiconClassifier::bundled()),
    })
}

fn cmd_transfer(ctx: &Ctx, a: TransferCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let source = read_corpus(&a.source)?;
    let target = read_corpus(&a.target)?;
    let hyper = ctx.res.hyper_with(&a.extraction);
    let cache = match &a.cache {
        Some(d) => VectorCache::on_disk(d),
        None => VectorCache::in_memory(),
    };
    let clf = classifier(a.labels.as_deref())?;
    let target_label: Sentiment = a.target_label.parse().map_err(|e| usage(format!("{e}")))?;

    if let Some(vp) = &a.vector {
        let base = vector(vp)?;
        base.check_model(&w)?;
        let lambda = a.lambda.unwrap_or(1.0);
        let h = hyper.for_spec(&base.spec);
        let get = |s: &String| cache.get_or_extract(&w, s, &base.spec, &h);
        let src = par::try_map(&source, get)?;
        let tgt = par::try_map(&target, get)?;
        let offset = compute_offset(&src.iter().collect::<Vec<_>>(), &tgt.iter().collect::<Vec<_>>())?;
        let output = transfer_one(&w, &base, &offset, lambda)?;
        let label = clf.classify(&output);
        let source_text = base.target_text.clone();
        return Ok(json!({
            "command": "transfer",
            "lambda": lambda,
            "spec": base.spec,
            "hyper": h,
            "result": TransferOutput { source: source_text.unwrap_or_default(), output, label },
        }));
    }

    let eval_path = a.eval.as_ref().ok_or_else(|| usage("transfer needs --vector or --eval"))?;
    let spec = resolve_spec(&a.extraction, &ctx.file, &w.config)?;
    let sets = StyleSets {
        source_sentences: source,
        target_sentences: target,
        eval_sentences: read_corpus(eval_path)?,
        target_label,
    };
    let lambdas = if a.lambdas.is_empty() { LAMBDA_GRID.to_vec() } else { a.lambdas };
    let curve = harness::run_transfer_eval(&w, &sets, &lambdas, clf.as_ref(), &spec, &hyper, &cache)?;
    Ok(json!({ "command": "transfer", "spec": spec, "hyper": hyper, "curve": curve }))
}

fn cmd_similarity(ctx: &Ctx, a: SimilarityCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let spec = resolve_spec(&a.extraction, &ctx.file, &w.config)?;
    let hyper = ctx.res.hyper_with(&a.extraction);
    let cache = match &a.cache {
        Some(d) => VectorCache::on_disk(d),
        None => VectorCache::in_memory(),
    };
    let report = harness::run_similarity_eval(&w, &a.pairs, &spec, &hyper, &cache)?;
    Ok(json!({ "command": "similarity", "spec": spec, "hyper": hyper, "report": report }))
}

fn cmd_interpolate(a: InterpolateCmd) -> Result<Value> {
    if a.points < 2 {
        return Err(usage("--points must be at least 2"));
    }
    let w = model(&a.model)?;
    let (x, y) = (vector(&a.from)?, vector(&a.to)?);
    let mut rows = Vec::with_capacity(a.points);
    for i in 0..a.points {
        let t = i as f64 / (a.points - 1) as f64;
        let v = interpolate(&x, &y, t)?;
        rows.push(json!({ "t": t, "text": decode_vector(&w, &v, steervec::eval::DEFAULT_MAX_LEN)? }));
    }
    Ok(json!({ "command": "interpolate", "points": rows }))
}

fn cmd_sample(ctx: &Ctx, a: SampleCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let vs = a.vectors.iter().map(|p| vector(p)).collect::<Result<Vec<_>>>()?;
    let samples = gaussian_sample(&vs.iter().collect::<Vec<_>>(), a.n, ctx.res.seed)?;
    let texts = par::map(&samples, |v| decode_vector(&w, v, steervec::eval::DEFAULT_MAX_LEN))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "command": "sample", "n": a.n, "texts": texts }))
}

fn cmd_radius(ctx: &Ctx, a: RadiusCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let v = vector(&a.vector)?;
    let target = target_of(a.text, &v)?;
    let scan = recovery_radius(&w, &v, &target, &a.eps, a.directions, ctx.res.seed)?;
    Ok(json!({ "command": "radius", "target": target, "scan": scan }))
}

fn cmd_memorize(ctx: &Ctx, a: MemorizeCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let spec = resolve_spec(&a.extraction, &ctx.file, &w.config)?;
    let hyper = ctx.res.hyper_with(&a.extraction);
    let natural = sentences(&a.corpus, a.min_tokens, a.max_tokens, a.sentences, ctx.res.seed)?;
    let shuffled = make_shuffled_fold(&natural, ctx.res.seed);
    let lengths: Vec<usize> = natural.iter().map(|s| s.len()).collect();
    let gibberish = make_gibberish_fold(&lengths, ctx.res.seed);
    let report = harness::memorization_report(&w, &natural, &shuffled, &gibberish, &spec, &hyper)?;
    Ok(json!({
        "command": "memorize",
        "spec": spec,
        "hyper": hyper,
        "ordered": report.ordered(),
        "report": report,
    }))
}

fn cmd_cluster(ctx: &Ctx, a: ClusterCmd) -> Result<Value> {
    let w = model(&a.model)?;
    let spec = resolve_spec(&a.extraction, &ctx.file, &w.config)?;
    let hyper = ctx.res.hyper_with(&a.extraction);
    let sents = sentences(&a.corpus, a.min_tokens, a.max_tokens, a.sentences, ctx.res.seed)?;
    let study = harness::run_seed_study(&w, &sents, &spec, &hyper, a.seeds)?;
    let flat: Vec<Vec<f64>> = study
        .vectors
        .iter()
        .flatten()
        .map(|v| v.values.iter().map(|&x| x as f64).collect())
        .collect();
    let pca = pca_2d(&flat)?;
    let points: Vec<Value> = pca
        .coords
        .iter()
        .enumerate()
        .map(|(i, c)| json!({ "sentence": i / a.seeds, "seed": i % a.seeds, "x": c[0], "y": c[1] }))
        .collect();
    Ok(json!({
        "command": "cluster",
        "spec": spec,
        "hyper": hyper,
        "study": study,
        "ratio": study.within_distance / study.between_distance,
        "pca_variances": pca.variances,
        "points": points,
    }))
}

fn cmd_storage(a: StorageCmd) -> Result<Value> {
    let v = vector(&a.vector)?;
    let text = target_of(a.text, &v)?;
    let report = harness::storage_report(&a.vector, &text)?;
    Ok(json!({ "command": "storage", "report": report }))
}
