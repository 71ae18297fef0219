use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::cache::VectorCache;
use super::par;
use super::sweeps::SweepHyper;
use crate::error::{Error, Result};
use crate::eval::{bleu4_smoothed, greedy_decode, word_tokens, Control, DEFAULT_MAX_LEN};
use crate::latent::{apply_offset, compute_offset, TransferRequest};
use crate::model::{InjectionSpec, ModelWeights};
use crate::svec::SteeringVector;

/// Scales from the accuracy/self-BLEU trade-off curve.
pub const LAMBDA_GRID: [f64; 10] = [0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

impl Sentiment {
    pub fn flipped(self) -> Self {
        match self {
            Sentiment::Positive => Sentiment::Negative,
            Sentiment::Negative => Sentiment::Positive,
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
        })
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" | "1" => Ok(Sentiment::Positive),
            "negative" | "neg" | "0" => Ok(Sentiment::Negative),
            other => Err(Error::InvalidArgument(format!("unknown sentiment label {other:?}"))),
        }
    }
}

/// Anything that can label generated text; `None` means undecided.
pub trait Classifier: Sync {
    fn classify(&self, text: &str) -> Option<Sentiment>;
}

/// Counts positive minus negative lexicon words; ties are undecided.
#[derive(Clone, Debug)]
pub struct LexiconClassifier {
    positive: HashSet<String>,
    negative: HashSet<String>,
}

const POSITIVE_WORDS: &str = include_str!("../../data/lexicon/positive.txt");
const NEGATIVE_WORDS: &str = include_str!("../../data/lexicon/negative.txt");

impl LexiconClassifier {
    pub fn bundled() -> Self {
        Self::from_lists(POSITIVE_WORDS, NEGATIVE_WORDS)
    }

    /// Word lists, one word per line.
    pub fn from_lists(positive: &str, negative: &str) -> Self {
        let set = |s: &str| {
            s.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect()
        };
        LexiconClassifier {
            positive: set(positive),
            negative: set(negative),
        }
    }

    pub fn score(&self, text: &str) -> i64 {
        word_tokens(&text.to_lowercase())
            .iter()
            .map(|w| self.positive.contains(w) as i64 - self.negative.contains(w) as i64)
            .sum()
    }
}

impl Classifier for LexiconClassifier {
    fn classify(&self, text: &str) -> Option<Sentiment> {
        match self.score(text) {
            s if s > 0 => Some(Sentiment::Positive),
            s if s < 0 => Some(Sentiment::Negative),
            _ => None,
        }
    }
}

/// Externally produced labels for exact output strings, read from
/// `text <TAB> label` rows.
#[derive(Clone, Debug, Default)]
pub struct LabeledOutputs {
    labels: HashMap<String, Sentiment>,
}

impl LabeledOutputs {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut labels = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (t, l) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected text<TAB>label".into()))?;
            let label = l.parse().map_err(|e: Error| parse_err(e.to_string()))?;
            labels.insert(t.to_string(), label);
        }
        Ok(LabeledOutputs { labels })
    }
}

impl Classifier for LabeledOutputs {
    fn classify(&self, text: &str) -> Option<Sentiment> {
        self.labels.get(text).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSets {
    pub source_sentences: Vec<String>,
    pub target_sentences: Vec<String>,
    /// Sentences in the source style to transfer.
    pub eval_sentences: Vec<String>,
    pub target_label: Sentiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferOutput {
    pub source: String,
    pub output: String,
    pub label: Option<Sentiment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub lambda: f64,
    /// Share of outputs the classifier assigns the target label.
    pub accuracy: f64,
    pub self_bleu: f64,
    pub outputs: Vec<TransferOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCurve {
    /// Target-label share of the untouched eval sentences.
    pub base_rate: f64,
    pub points: Vec<TransferPoint>,
}

/// Decodes `base + λ · offset` with greedy decoding.
pub fn transfer_one(
    weights: &ModelWeights<f32>,
    base: &SteeringVector,
    offset: &crate::latent::OffsetVector,
    lambda: f64,
) -> Result<String> {
    let v = apply_offset(&TransferRequest {
        base,
        offset,
        lambda_scale: lambda,
    })?;
    let up = v.up_projected(weights.config.d_model)?;
    let d = greedy_decode(
        weights,
        Control::Inject {
            vector: &up,
            spec: &v.spec,
        },
        DEFAULT_MAX_LEN,
    )?;
    Ok(d.text())
}

/// Offset from source-style to target-style centroids, applied to every
/// eval sentence at each λ.
pub fn run_transfer_eval(
    weights: &ModelWeights<f32>,
    sets: &StyleSets,
    lambdas: &[f64],
    classifier: &dyn Classifier,
    spec: &InjectionSpec,
    hyper: &SweepHyper,
    cache: &VectorCache,
) -> Result<TransferCurve> {
    if sets.source_sentences.is_empty()
        || sets.target_sentences.is_empty()
        || sets.eval_sentences.is_empty()
    {
        return Err(Error::InvalidArgument("style sets must be non-empty".into()));
    }
    let h = hyper.for_spec(spec);
    let get = |s: &String| cache.get_or_extract(weights, s, spec, &h);
    let source = par::try_map(&sets.source_sentences, get)?;
    let target = par::try_map(&sets.target_sentences, get)?;
    let eval = par::try_map(&sets.eval_sentences, get)?;
    let offset = compute_offset(
        &source.iter().collect::<Vec<_>>(),
        &target.iter().collect::<Vec<_>>(),
    )?;
    let n = sets.eval_sentences.len() as f64;
    let hits = |labels: &mut dyn Iterator<Item = Option<Sentiment>>| {
        labels.filter(|l| *l == Some(sets.target_label)).count() as f64 / n
    };
    let base_rate = hits(&mut sets.eval_sentences.iter().map(|s| classifier.classify(s)));

    let jobs: Vec<(f64, usize)> = lambdas
        .iter()
        .flat_map(|&l| (0..eval.len()).map(move |i| (l, i)))
        .collect();
    let texts = par::try_map(&jobs, |&(l, i)| transfer_one(weights, &eval[i], &offset, l))?;
    let points = lambdas
        .iter()
        .map(|&l| {
            let outputs: Vec<TransferOutput> = jobs
                .iter()
                .zip(&texts)
                .filter(|((jl, _), _)| *jl == l)
                .map(|(&(_, i), t)| TransferOutput {
                    source: sets.eval_sentences[i].clone(),
                    output: t.clone(),
                    label: classifier.classify(t),
                })
                .collect();
            let self_bleu = outputs
                .iter()
                .map(|o| bleu4_smoothed(&o.output, &o.source))
                .sum::<f64>()
                / n;
            let accuracy = hits(&mut outputs.iter().map(|o| o.label));
            TransferPoint {
                lambda: l,
                accuracy,
                self_bleu,
                outputs,
            }
        })
        .collect();
    Ok(TransferCurve { base_rate, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_majority_and_ties() {
        let c = LexiconClassifier::from_lists("good\ngreat\n", "bad\n");
        assert_eq!(c.classify("A good, great day."), Some(Sentiment::Positive));
        assert_eq!(c.classify("Good but bad."), None);
        assert_eq!(c.classify("BAD food"), Some(Sentiment::Negative));
        assert_eq!(c.classify("nothing here"), None);
    }

    #[test]
    fn bundled_lexicon_reads_review_lines() {
        let c = LexiconClassifier::bundled();
        assert_eq!(c.classify("The tea was perfect."), Some(Sentiment::Positive));
        assert_eq!(c.classify("The tea was horrible."), Some(Sentiment::Negative));
    }

    #[test]
    fn labeled_outputs_parse_and_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.tsv");
        std::fs::write(&p, "nice day\tpositive\nawful\tneg\n").unwrap();
        let l = LabeledOutputs::load(&p).unwrap();
        assert_eq!(l.classify("awful"), Some(Sentiment::Negative));
        assert_eq!(l.classify("unknown"), None);
        std::fs::write(&p, "ok\tpositive\nno label here\n").unwrap();
        match LabeledOutputs::load(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
