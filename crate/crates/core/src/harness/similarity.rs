use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cache::VectorCache;
use super::par;
use super::sweeps::SweepHyper;
use crate::error::{Error, Result};
use crate::latent::{correlations, cosine_similarity, CorrelationResult};
use crate::model::{mean_pool_hidden, InjectionSpec, ModelWeights};
use crate::tokenizer::encode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub score: f64,
    pub first: String,
    pub second: String,
}

/// Column positions of the score and the two sentences.
#[derive(Clone, Copy, Debug)]
struct Layout {
    score: usize,
    first: usize,
    second: usize,
}

/// The three-column layout, or the STS-benchmark distribution layout
/// (genre, file, year, id, score, sentence1, sentence2, ...).
fn layout_for_width(width: usize) -> Option<Layout> {
    match width {
        3 => Some(Layout { score: 0, first: 1, second: 2 }),
        w if w >= 7 => Some(Layout { score: 4, first: 5, second: 6 }),
        _ => None,
    }
}

/// A header row naming `score`, `sentence1` and `sentence2` columns.
fn layout_from_header(fields: &[&str]) -> Option<Layout> {
    let find = |name: &str| fields.iter().position(|f| f.trim().eq_ignore_ascii_case(name));
    Some(Layout {
        score: find("score")?,
        first: find("sentence1").or_else(|| find("s1"))?,
        second: find("sentence2").or_else(|| find("s2"))?,
    })
}

/// Scored sentence pairs with gold scores in [0, 5]. Accepts
/// `score <TAB> sentence1 <TAB> sentence2` rows, the STS-benchmark layout with
/// the score in the fifth column, or any layout given by a header row.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<SimilarityPair>> {
    let mut pairs = Vec::new();
    let mut header: Option<Layout> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if pairs.is_empty() && header.is_none() {
            if let Some(l) = layout_from_header(&fields) {
                header = Some(l);
                continue;
            }
        }
        let layout = match header {
            Some(l) if fields.len() > l.score.max(l.first).max(l.second) => l,
            Some(_) => return Err(err(format!("row has only {} fields", fields.len()))),
            None => layout_for_width(fields.len()).ok_or_else(|| {
                err(format!("expected 3 tab-separated fields, found {}", fields.len()))
            })?,
        };
        let raw = fields[layout.score].trim();
        let score: f64 = raw
            .parse()
            .map_err(|_| err(format!("score {raw:?} is not a number")))?;
        if !(0.0..=5.0).contains(&score) {
            return Err(err(format!("score {score} outside [0, 5]")));
        }
        let (first, second) = (fields[layout.first].trim(), fields[layout.second].trim());
        if first.is_empty() || second.is_empty() {
            return Err(err("empty sentence".into()));
        }
        pairs.push(SimilarityPair {
            score,
            first: first.to_string(),
            second: second.to_string(),
        });
    }
    if pairs.len() < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: text.lines().count(),
            reason: "need at least two scored pairs".into(),
        });
    }
    Ok(pairs)
}

pub fn load_pairs(path: &Path) -> Result<Vec<SimilarityPair>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pairs(&text, path)
}

/// Mean of the final hidden states over BOS and the sentence bytes.
pub fn pooled_hidden(weights: &ModelWeights<f32>, text: &str) -> Result<Vec<f32>> {
    let mut ids = encode(text).ids_usize();
    ids.pop();
    ids.truncate(weights.config.max_positions);
    mean_pool_hidden(weights, &ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub steering: CorrelationResult,
    pub pooled_baseline: CorrelationResult,
    pub n_pairs: usize,
    pub n_sentences: usize,
    pub source: Option<PathBuf>,
}

fn distinct_sentences(pairs: &[SimilarityPair]) -> Vec<String> {
    pairs
        .iter()
        .flat_map(|p| [p.first.clone(), p.second.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn correlate_with(
    pairs: &[SimilarityPair],
    sentences: &[String],
    vectors: &[Vec<f32>],
) -> Result<CorrelationResult> {
    let lookup = |s: &str| {
        let i = sentences.binary_search_by(|x| x.as_str().cmp(s)).expect("sentence indexed");
        &vectors[i]
    };
    let cosines = pairs
        .iter()
        .map(|p| cosine_similarity(lookup(&p.first), lookup(&p.second)))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    correlations(&cosines, &gold)
}

/// Correlation of pooled-hidden-state cosines with the gold scores.
pub fn pooled_baseline(
    weights: &ModelWeights<f32>,
    pairs: &[SimilarityPair],
) -> Result<CorrelationResult> {
    let sentences = distinct_sentences(pairs);
    let pooled = par::try_map(&sentences, |s| pooled_hidden(weights, s))?;
    correlate_with(pairs, &sentences, &pooled)
}

pub fn similarity_eval(
    weights: &ModelWeights<f32>,
    pairs: &[SimilarityPair],
    spec: &InjectionSpec,
    hyper: &SweepHyper,
    cache: &VectorCache,
) -> Result<SimilarityReport> {
    let sentences = distinct_sentences(pairs);
    let h = hyper.for_spec(spec);
    let vectors = par::try_map(&sentences, |s| {
        cache.get_or_extract(weights, s, spec, &h).map(|v| v.values)
    })?;
    Ok(SimilarityReport {
        steering: correlate_with(pairs, &sentences, &vectors)?,
        pooled_baseline: pooled_baseline(weights, pairs)?,
        n_pairs: pairs.len(),
        n_sentences: sentences.len(),
        source: None,
    })
}

pub fn run_similarity_eval(
    weights: &ModelWeights<f32>,
    pairs_path: &Path,
    spec: &InjectionSpec,
    hyper: &SweepHyper,
    cache: &VectorCache,
) -> Result<SimilarityReport> {
    let pairs = load_pairs(pairs_path)?;
    let mut report = similarity_eval(weights, &pairs, spec, hyper, cache)?;
    report.source = Some(pairs_path.to_path_buf());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<SimilarityPair>> {
        parse_pairs(text, Path::new("pairs.tsv"))
    }

    #[test]
    fn header_and_rows() {
        let p = parse("score\ts1\ts2\n4.5\tA cat.\tA dog.\n0\tx\ty\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].score, 4.5);
        assert_eq!(p[1].second, "y");
    }

    #[test]
    fn benchmark_layouts() {
        let dist = "main-captions\tMSRvid\t2012test\t0001\t5.000\tA man plays.\tA man is playing.\n\
                    main-news\theadlines\t2013\t0002\t0.4\tRain today.\tStocks fell.\tsrc\n";
        let p = parse(dist).unwrap();
        assert_eq!((p[0].score, p[1].second.as_str()), (5.0, "Stocks fell."));
        let glue = "index\tgenre\tsentence1\tsentence2\tscore\n0\tx\tA b.\tC d.\t3.2\n1\tx\tE.\tF.\t1\n";
        let p = parse(glue).unwrap();
        assert_eq!((p[0].score, p[0].first.as_str()), (3.2, "A b."));
    }

    #[test]
    fn malformed_rows_name_their_line() {
        for (text, line) in [
            ("1\ta\tb\n2\ta\n", 2),
            ("1\ta\tb\n2\ta\tb\tc\td\n", 2),
            ("1\ta\tb\nfive\ta\tb\n", 2),
            ("6\ta\tb\n1\ta\tb\n", 1),
            ("1\ta\tb\n2\ta\tb\n-1\tc\td\n", 3),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
