use std::path::Path;

use serde::{Deserialize, Serialize};

use super::par;
use crate::error::{Error, Result};
use crate::eval::{greedy_decode, Control, RecoveryReport, DEFAULT_MAX_LEN};
use crate::extract::{extract, extract_prefix, mean_vector, ExtractionHyper, ExtractionReport};
use crate::latent::cluster_distances;
use crate::model::{InjectionSite, InjectionSpec, ModelWeights, Timesteps};
use crate::svec::SteeringVector;

/// Optimization budget shared by every cell of a sweep; the learning rate
/// follows the per-site default unless pinned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepHyper {
    pub max_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    pub early_stop_check_every: usize,
    pub decay_factor: f64,
    pub patience: u32,
}

impl Default for SweepHyper {
    fn default() -> Self {
        SweepHyper {
            max_steps: 500,
            seed: 0,
            learning_rate: None,
            early_stop_check_every: 25,
            decay_factor: 0.9,
            patience: 1,
        }
    }
}

/// Learning rate for prefix (virtual input embedding) optimization.
pub const PREFIX_LEARNING_RATE: f64 = 0.01;

impl SweepHyper {
    pub fn with_seed(seed: u64) -> Self {
        SweepHyper {
            seed,
            ..Self::default()
        }
    }

    pub fn for_spec(&self, spec: &InjectionSpec) -> ExtractionHyper {
        let base = ExtractionHyper::for_spec(spec, self.seed);
        ExtractionHyper {
            max_steps: self.max_steps,
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            early_stop_check_every: self.early_stop_check_every,
            decay_factor: self.decay_factor,
            patience: self.patience,
            ..base
        }
    }

    pub fn for_prefix(&self) -> ExtractionHyper {
        ExtractionHyper {
            max_steps: self.max_steps,
            learning_rate: self.learning_rate.unwrap_or(PREFIX_LEARNING_RATE),
            early_stop_check_every: self.early_stop_check_every,
            decay_factor: self.decay_factor,
            patience: self.patience,
            seed: self.seed,
            adam: Default::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub sentence: String,
    pub decoded: String,
    pub bleu4: f64,
    pub exact_match: bool,
    pub steps_used: usize,
    pub final_loss: f64,
}

impl SentenceResult {
    fn from_report(r: &ExtractionReport) -> Self {
        SentenceResult {
            sentence: r.recovery.target.clone(),
            decoded: r.recovery.decoded.clone(),
            bleu4: r.recovery.bleu4,
            exact_match: r.recovery.exact_match,
            steps_used: r.steps_used,
            final_loss: r.final_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub sites: String,
    pub timesteps: String,
    pub steer_dim: usize,
    pub n: usize,
    pub mean_bleu4: f64,
    pub exact_rate: f64,
    pub rows: Vec<SentenceResult>,
}

impl CellResult {
    fn new(cell: String, sites: String, timesteps: String, steer_dim: usize, rows: Vec<SentenceResult>) -> Self {
        let n = rows.len();
        let mean_bleu4 = rows.iter().map(|r| r.bleu4).sum::<f64>() / n.max(1) as f64;
        let exact_rate = rows.iter().filter(|r| r.exact_match).count() as f64 / n.max(1) as f64;
        CellResult {
            cell,
            sites,
            timesteps,
            steer_dim,
            n,
            mean_bleu4,
            exact_rate,
            rows,
        }
    }

    fn from_reports(spec: &InjectionSpec, reports: &[ExtractionReport]) -> Self {
        CellResult::new(
            cell_label(spec),
            spec.sites_label(),
            spec.timesteps.to_string(),
            spec.steer_dim,
            reports.iter().map(SentenceResult::from_report).collect(),
        )
    }
}

pub fn cell_label(spec: &InjectionSpec) -> String {
    format!("{}/{}/d{}", spec.sites_label(), spec.timesteps, spec.steer_dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: String,
    pub cells: Vec<CellResult>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    cell: &'a str,
    sites: &'a str,
    timesteps: &'a str,
    steer_dim: usize,
    n: usize,
    mean_bleu4: f64,
    exact_rate: f64,
}

impl SweepTable {
    pub fn cell(&self, label: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == label)
    }

    /// One summary row per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(CsvRow {
                cell: &c.cell,
                sites: &c.sites,
                timesteps: &c.timesteps,
                steer_dim: c.steer_dim,
                n: c.n,
                mean_bleu4: c.mean_bleu4,
                exact_rate: c.exact_rate,
            })
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, csv_path: &Path, json_path: Option<&Path>) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()?)
            .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
        if let Some(p) = json_path {
            std::fs::write(p, serde_json::to_vec_pretty(self)?)
                .map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        }
        Ok(())
    }
}

/// One extraction per sentence, spread over the worker pool.
pub fn extract_all(
    weights: &ModelWeights<f32>,
    sentences: &[String],
    spec: &InjectionSpec,
    hyper: &ExtractionHyper,
) -> Result<Vec<ExtractionReport>> {
    par::try_map(sentences, |s| extract(weights, s, spec, hyper))
}

fn run_specs(
    weights: &ModelWeights<f32>,
    sentences: &[String],
    specs: &[InjectionSpec],
    hyper: &SweepHyper,
    kind: &str,
) -> Result<SweepTable> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    for s in specs {
        s.validate(&weights.config)?;
    }
    let jobs: Vec<(usize, &String)> = (0..specs.len())
        .flat_map(|c| sentences.iter().map(move |s| (c, s)))
        .collect();
    let reports = par::try_map(&jobs, |&(c, s)| {
        extract(weights, s, &specs[c], &hyper.for_spec(&specs[c]))
    })?;
    let cells = specs
        .iter()
        .enumerate()
        .map(|(c, spec)| {
            let mine: Vec<ExtractionReport> = jobs
                .iter()
                .zip(&reports)
                .filter(|((jc, _), _)| *jc == c)
                .map(|(_, r)| r.clone())
                .collect();
            CellResult::from_reports(spec, &mine)
        })
        .collect();
    Ok(SweepTable {
        kind: kind.into(),
        cells,
    })
}

/// Every (site group, timestep) cell over the sentence set.
pub fn run_injection_sweep(
    weights: &ModelWeights<f32>,
    sentences: &[String],
    site_grid: &[Vec<InjectionSite>],
    timestep_grid: &[Timesteps],
    steer_dim: usize,
    hyper: &SweepHyper,
) -> Result<SweepTable> {
    if site_grid.is_empty() || timestep_grid.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let specs: Vec<InjectionSpec> = site_grid
        .iter()
        .flat_map(|sites| {
            timestep_grid
                .iter()
                .map(move |&ts| InjectionSpec::new(sites.clone(), ts, steer_dim))
        })
        .collect();
    run_specs(weights, sentences, &specs, hyper, "injection")
}

/// `{d/4, d/2, 3d/4, d}`.
pub fn default_dims(d_model: usize) -> Vec<usize> {
    (1..=4).map(|i| (d_model * i / 4).max(1)).collect()
}

/// Recovery as a function of steering dimension via semi-orthogonal
/// up-projection.
pub fn run_dimension_sweep(
    weights: &ModelWeights<f32>,
    sentences: &[String],
    sites: &[InjectionSite],
    timesteps: Timesteps,
    dims: &[usize],
    hyper: &SweepHyper,
) -> Result<SweepTable> {
    let specs: Vec<InjectionSpec> = dims
        .iter()
        .map(|&d| InjectionSpec::new(sites.to_vec(), timesteps, d))
        .collect();
    run_specs(weights, sentences, &specs, hyper, "dimension")
}

/// `k` trainable virtual input embeddings before BOS, one cell per `k`.
/// `k = 0` scores plain unsteered decoding.
pub fn run_prompt_baseline(
    weights: &ModelWeights<f32>,
    sentences: &[String],
    ks: &[usize],
    hyper: &SweepHyper,
) -> Result<SweepTable> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("empty prompt-length grid".into()));
    }
    let jobs: Vec<(usize, &String)> = ks
        .iter()
        .flat_map(|&k| sentences.iter().map(move |s| (k, s)))
        .collect();
    let h = hyper.for_prefix();
    let rows = par::try_map(&jobs, |&(k, s)| -> Result<SentenceResult> {
        if k == 0 {
            let d = greedy_decode(weights, Control::Free, DEFAULT_MAX_LEN)?;
            let r = RecoveryReport::score(s, &d);
            return Ok(SentenceResult {
                sentence: s.clone(),
                decoded: r.decoded,
                bleu4: r.bleu4,
                exact_match: r.exact_match,
                steps_used: 0,
                final_loss: f64::NAN,
            });
        }
        let r = extract_prefix(weights, s, k, &h)?;
        Ok(SentenceResult {
            sentence: s.clone(),
            decoded: r.recovery.decoded,
            bleu4: r.recovery.bleu4,
            exact_match: r.recovery.exact_match,
            steps_used: r.steps_used,
            final_loss: r.final_loss,
        })
    })?;
    let cells = ks
        .iter()
        .map(|&k| {
            let mine = jobs
                .iter()
                .zip(&rows)
                .filter(|((jk, _), _)| *jk == k)
                .map(|(_, r)| r.clone())
                .collect();
            CellResult::new(
                format!("prompt/k{k}"),
                "prefix".into(),
                "-".into(),
                weights.config.d_model * k,
                mine,
            )
        })
        .collect();
    Ok(SweepTable {
        kind: "prompt".into(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub n: usize,
    pub mean_bleu4: f64,
    pub exact_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub natural: FoldScore,
    pub shuffled: FoldScore,
    pub gibberish: FoldScore,
}

impl MemorizationReport {
    pub fn ordered(&self) -> bool {
        self.natural.mean_bleu4 >= self.shuffled.mean_bleu4
            && self.shuffled.mean_bleu4 >= self.gibberish.mean_bleu4
    }
}

/// Same spec and budget for natural, word-shuffled and random-byte folds.
pub fn memorization_report(
    weights: &ModelWeights<f32>,
    natural: &[String],
    shuffled: &[String],
    gibberish: &[String],
    spec: &InjectionSpec,
    hyper: &SweepHyper,
) -> Result<MemorizationReport> {
    if natural.len() != shuffled.len() || natural.len() != gibberish.len() || natural.is_empty() {
        return Err(Error::InvalidArgument(
            "memorization folds must be non-empty and equally sized".into(),
        ));
    }
    let h = hyper.for_spec(spec);
    let score = |fold: &[String]| -> Result<FoldScore> {
        let reports = extract_all(weights, fold, spec, &h)?;
        let c = CellResult::from_reports(spec, &reports);
        Ok(FoldScore {
            n: c.n,
            mean_bleu4: c.mean_bleu4,
            exact_rate: c.exact_rate,
        })
    };
    Ok(MemorizationReport {
        natural: score(natural)?,
        shuffled: score(shuffled)?,
        gibberish: score(gibberish)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub sentence: String,
    pub exact_runs: usize,
    pub n_seeds: usize,
    pub mean_vector_bleu4: f64,
    pub mean_vector_exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub rows: Vec<SeedRow>,
    pub exact_rate: f64,
    pub within_distance: f64,
    pub between_distance: f64,
    #[serde(skip)]
    pub vectors: Vec<Vec<SteeringVector>>,
}

/// `n_seeds` extractions per sentence, recovery of each sentence's mean
/// vector, and within- vs between-sentence distances in the full space.
pub fn run_seed_study(
    weights: &ModelWeights<f32>,
    sentences: &[String],
    spec: &InjectionSpec,
    hyper: &SweepHyper,
    n_seeds: usize,
) -> Result<SeedStudy> {
    if n_seeds < 2 || sentences.len() < 2 {
        return Err(Error::InvalidArgument(
            "seed study needs at least 2 sentences and 2 seeds".into(),
        ));
    }
    let jobs: Vec<(usize, u64)> = (0..sentences.len())
        .flat_map(|i| (0..n_seeds as u64).map(move |k| (i, k)))
        .collect();
    let base = hyper.for_spec(spec);
    let reports = par::try_map(&jobs, |&(i, k)| {
        let h = ExtractionHyper {
            seed: base.seed.wrapping_add(k),
            ..base.clone()
        };
        extract(weights, &sentences[i], spec, &h)
    })?;
    let mut vectors: Vec<Vec<SteeringVector>> = vec![Vec::new(); sentences.len()];
    let mut exact = vec![0usize; sentences.len()];
    for (&(i, _), r) in jobs.iter().zip(&reports) {
        exact[i] += r.exact_match() as usize;
        vectors[i].push(r.vector.clone());
    }
    let idx: Vec<usize> = (0..sentences.len()).collect();
    let mean_recovery = par::try_map(&idx, |&i| {
        let refs: Vec<&SteeringVector> = vectors[i].iter().collect();
        let m = mean_vector(&refs)?;
        crate::eval::recovery_score(weights, &m, &sentences[i])
    })?;
    let rows = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| SeedRow {
            sentence: s.clone(),
            exact_runs: exact[i],
            n_seeds,
            mean_vector_bleu4: mean_recovery[i].bleu4,
            mean_vector_exact: mean_recovery[i].exact_match,
        })
        .collect();
    let groups: Vec<Vec<&[f32]>> = vectors
        .iter()
        .map(|g| g.iter().map(|v| &v.values[..]).collect())
        .collect();
    let (within, between) = cluster_distances(&groups)?;
    Ok(SeedStudy {
        rows,
        exact_rate: exact.iter().sum::<usize>() as f64 / jobs.len() as f64,
        within_distance: within,
        between_distance: between,
        vectors,
    })
}
