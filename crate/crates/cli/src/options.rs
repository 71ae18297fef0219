use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use steervec::harness::SweepHyper;
use steervec::model::{InjectionSite, InjectionSpec, ModelConfig, Timesteps};
use steervec::train::TrainConfig;

/// Bad flags or configuration; reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "steervec", version, about = "Extract and compose steering vectors for a tiny byte-level decoder")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "STEERVEC_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for batch work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// JSON file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the decoder on a sentence-per-line corpus.
    Train(TrainArgs),
    /// Extract a steering vector for one sentence.
    Extract(ExtractCmd),
    /// Greedy-decode from a steering vector.
    Decode(DecodeCmd),
    /// Decode a vector and score it against its target sentence.
    Recover(RecoverCmd),
    /// Injection-site, dimension or prompt-length sweep over corpus sentences.
    Sweep(SweepCmd),
    /// Shift vectors along a source-to-target style offset.
    Transfer(TransferCmd),
    /// Correlate vector cosines with scored sentence pairs.
    Similarity(SimilarityCmd),
    /// Decode points on the segment between two vectors.
    Interpolate(InterpolateCmd),
    /// Decode samples from a Gaussian fitted to a set of vectors.
    Sample(SampleCmd),
    /// Largest perturbation radius that still recovers the target.
    Radius(RadiusCmd),
    /// Recovery on natural, word-shuffled and random-byte sentences.
    Memorize(MemorizeCmd),
    /// Multi-seed extraction, distances and a 2-D projection.
    Cluster(ClusterCmd),
    /// Bytes for a sentence as text versus as a vector file.
    Storage(StorageCmd),
}

/// Shared extraction settings.
#[derive(Args, Debug, Clone, Default)]
pub struct ExtractArgs {
    /// Injection sites joined by '+', e.g. `attn:2` or `embedding+lm_head`.
    #[arg(long)]
    pub site: Option<String>,
    #[arg(long, value_enum)]
    pub timesteps: Option<TimestepArg>,
    /// Steering dimension; defaults to the model width.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Exact-decode check interval; 0 disables early stopping.
    #[arg(long)]
    pub check_every: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepArg {
    First,
    All,
}

impl From<TimestepArg> for Timesteps {
    fn from(t: TimestepArg) -> Self {
        match t {
            TimestepArg::First => Timesteps::First,
            TimestepArg::All => Timesteps::All,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub context_length: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Loss trace JSON path.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Store the payload as 16-bit floats.
    #[arg(long)]
    pub half: bool,
    #[command(flatten)]
    pub extraction: ExtractArgs,
}

#[derive(Args, Debug)]
pub struct DecodeCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vector: PathBuf,
    #[arg(long, default_value_t = steervec::eval::DEFAULT_MAX_LEN)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct RecoverCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vector: PathBuf,
    /// Target sentence; defaults to the text stored in the vector file.
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Injection,
    Dimension,
    Prompt,
}

#[derive(Args, Debug)]
pub struct SweepCmd {
    #[arg(value_enum)]
    pub kind: SweepKind,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of sentences sampled from the corpus.
    #[arg(long, default_value_t = 32)]
    pub sentences: usize,
    /// Inclusive lower bound on whitespace tokens.
    #[arg(long, default_value_t = 5)]
    pub min_tokens: usize,
    /// Exclusive upper bound on whitespace tokens.
    #[arg(long, default_value_t = 20)]
    pub max_tokens: usize,
    /// Injection sweep: site specs to compare (repeatable).
    #[arg(long = "grid-site")]
    pub grid_sites: Vec<String>,
    /// Injection sweep: timestep settings to compare.
    #[arg(long = "grid-timesteps", value_enum, value_delimiter = ',', default_value = "all")]
    pub grid_timesteps: Vec<TimestepArg>,
    /// Dimension sweep: steering dimensions.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Prompt sweep: numbers of prefix vectors.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub extraction: ExtractArgs,
}

#[derive(Args, Debug)]
pub struct TransferCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Sentences in the source style, one per line.
    #[arg(long)]
    pub source: PathBuf,
    /// Sentences in the target style, one per line.
    #[arg(long)]
    pub target: PathBuf,
    /// Vector to transfer.
    #[arg(long, conflicts_with = "eval")]
    pub vector: Option<PathBuf>,
    #[arg(long, requires = "vector")]
    pub lambda: Option<f64>,
    /// Sentences to transfer across the λ grid.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Labels for generated text (`text <TAB> label`) instead of the lexicon.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "positive")]
    pub target_label: String,
    /// Directory for cached vectors.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub extraction: ExtractArgs,
}

#[derive(Args, Debug)]
pub struct SimilarityCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// TSV rows of `score <TAB> sentence1 <TAB> sentence2`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub extraction: ExtractArgs,
}

#[derive(Args, Debug)]
pub struct InterpolateCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub to: PathBuf,
    /// Number of evenly spaced points including both ends.
    #[arg(long, default_value_t = 5)]
    pub points: usize,
}

#[derive(Args, Debug)]
pub struct SampleCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Vectors to fit (at least two).
    #[arg(long = "vector", required = true)]
    pub vectors: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct RadiusCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vector: PathBuf,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4,8")]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub directions: usize,
}

#[derive(Args, Debug)]
pub struct MemorizeCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub sentences: usize,
    #[arg(long, default_value_t = 5)]
    pub min_tokens: usize,
    #[arg(long, default_value_t = 20)]
    pub max_tokens: usize,
    #[command(flatten)]
    pub extraction: ExtractArgs,
}

#[derive(Args, Debug)]
pub struct ClusterCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub sentences: usize,
    #[arg(long, default_value_t = 8)]
    pub seeds: usize,
    #[arg(long, default_value_t = 5)]
    pub min_tokens: usize,
    #[arg(long, default_value_t = 20)]
    pub max_tokens: usize,
    #[command(flatten)]
    pub extraction: ExtractArgs,
}

#[derive(Args, Debug)]
pub struct StorageCmd {
    #[arg(long)]
    pub vector: PathBuf,
    #[arg(long)]
    pub text: Option<String>,
}

/// Contents of `--config`. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub site: Option<String>,
    pub timesteps: Option<Timesteps>,
    pub steer_dim: Option<usize>,
    pub max_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub early_stop_check_every: Option<usize>,
    pub decay_factor: Option<f64>,
    pub patience: Option<u32>,
    pub train: Option<TrainConfig>,
    pub model: Option<ModelConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }
}

pub fn parse_sites(s: &str) -> anyhow::Result<Vec<InjectionSite>> {
    InjectionSpec::parse_sites(s).map_err(|e| usage(e.to_string()))
}

/// Settings after layering defaults, the config file and flags.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub seed: u64,
    /// Seed given by flag, environment or config file, if any.
    pub explicit_seed: Option<u64>,
    pub workers: usize,
    pub hyper: SweepHyper,
}

impl Resolved {
    pub fn new(cli_seed: Option<u64>, cli_workers: Option<usize>, file: &FileConfig) -> anyhow::Result<Self> {
        let explicit_seed = cli_seed.or(file.seed);
        let seed = explicit_seed.unwrap_or(0);
        let workers = cli_workers.or(file.workers).unwrap_or(1);
        if workers == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        let d = SweepHyper::default();
        let hyper = SweepHyper {
            seed,
            max_steps: file.max_steps.unwrap_or(d.max_steps),
            learning_rate: file.learning_rate,
            early_stop_check_every: file.early_stop_check_every.unwrap_or(d.early_stop_check_every),
            decay_factor: file.decay_factor.unwrap_or(d.decay_factor),
            patience: file.patience.unwrap_or(d.patience),
        };
        Ok(Resolved { seed, explicit_seed, workers, hyper })
    }

    pub fn hyper_with(&self, a: &ExtractArgs) -> SweepHyper {
        SweepHyper {
            max_steps: a.max_steps.unwrap_or(self.hyper.max_steps),
            learning_rate: a.lr.or(self.hyper.learning_rate),
            early_stop_check_every: a.check_every.unwrap_or(self.hyper.early_stop_check_every),
            ..self.hyper.clone()
        }
    }
}

/// Injection spec from flags, then the config file, then the default of the
/// middle layer's post-attention site at every timestep and full width.
pub fn resolve_spec(a: &ExtractArgs, file: &FileConfig, cfg: &ModelConfig) -> anyhow::Result<InjectionSpec> {
    let sites = match a.site.as_deref().or(file.site.as_deref()) {
        Some(s) => parse_sites(s)?,
        None => vec![InjectionSite::AfterSelfAttn(cfg.middle_layer())],
    };
    let ts = a.timesteps.map(Into::into).or(file.timesteps).unwrap_or(Timesteps::All);
    let dim = a.dim.or(file.steer_dim).unwrap_or(cfg.d_model);
    let spec = InjectionSpec::new(sites, ts, dim);
    spec.validate(cfg).map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}
