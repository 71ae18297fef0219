use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::train::read_corpus;

/// Half-open whitespace-token length ranges; the last bin is capped at 128.
pub const BIN_RANGES: [(usize, usize); 8] = [
    (5, 10),
    (10, 15),
    (15, 20),
    (20, 25),
    (25, 30),
    (30, 35),
    (35, 40),
    (40, 129),
];

pub const DEFAULT_PER_BIN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub min_tokens: usize,
    /// Exclusive upper bound.
    pub max_tokens: usize,
    pub sentences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBinnedSet {
    pub bins: Vec<LengthBin>,
    pub per_bin: usize,
    pub seed: u64,
}

impl LengthBinnedSet {
    pub fn all(&self) -> Vec<String> {
        self.bins.iter().flat_map(|b| b.sentences.iter().cloned()).collect()
    }
}

pub fn bin_label(lo: usize, hi: usize) -> String {
    format!("{lo}-{}", hi - 1)
}

/// Sentences whose whitespace-token count lies in `[lo, hi)`, in corpus order.
pub fn sentences_in_range(lines: &[String], lo: usize, hi: usize) -> Vec<String> {
    lines
        .iter()
        .filter(|l| (lo..hi).contains(&l.split_whitespace().count()))
        .cloned()
        .collect()
}

/// Samples up to `per_bin` sentences per length bin, without replacement.
pub fn bin_sentences(lines: &[String], per_bin: usize, seed: u64) -> Result<LengthBinnedSet> {
    let mut bins = Vec::with_capacity(BIN_RANGES.len());
    let mut empty = Vec::new();
    for (i, &(lo, hi)) in BIN_RANGES.iter().enumerate() {
        let candidates = sentences_in_range(lines, lo, hi);
        if candidates.is_empty() {
            empty.push(bin_label(lo, hi));
            continue;
        }
        let mut rng = SeededRng::derive(seed, i as u64);
        let picks = rng.sample_indices(candidates.len(), per_bin.min(candidates.len()));
        bins.push(LengthBin {
            min_tokens: lo,
            max_tokens: hi,
            sentences: picks.into_iter().map(|j| candidates[j].clone()).collect(),
        });
    }
    if !empty.is_empty() {
        return Err(Error::EmptyBins(empty.join(", ")));
    }
    Ok(LengthBinnedSet {
        bins,
        per_bin,
        seed,
    })
}

pub fn build_length_bins(corpus: &Path, seed: u64) -> Result<LengthBinnedSet> {
    bin_sentences(&read_corpus(corpus)?, DEFAULT_PER_BIN, seed)
}

/// `n` sentences with `lo ≤ whitespace tokens < hi`, sampled without replacement.
pub fn sample_sentences(
    lines: &[String],
    lo: usize,
    hi: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let candidates = sentences_in_range(lines, lo, hi);
    if candidates.len() < n {
        return Err(Error::InvalidArgument(format!(
            "only {} sentences with {lo}..{hi} tokens, wanted {n}",
            candidates.len()
        )));
    }
    let mut rng = SeededRng::derive(seed, 0x5341_4d50);
    Ok(rng
        .sample_indices(candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

/// Each sentence's whitespace tokens in a random order, rejoined by spaces.
pub fn make_shuffled_fold(sentences: &[String], seed: u64) -> Vec<String> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut words: Vec<&str> = s.split_whitespace().collect();
            SeededRng::derive(seed, i as u64).shuffle(&mut words);
            words.join(" ")
        })
        .collect()
}

/// Uniform draws over printable ASCII, one string per requested byte length.
pub fn make_gibberish_fold(lengths: &[usize], seed: u64) -> Vec<String> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut rng = SeededRng::derive(seed, 0x4742_0000 + i as u64);
            (0..n).map(|_| (b' ' + rng.below(95) as u8) as char).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn only_first_bin_fillable() {
        let corpus = lines(&["one two three four five six seven"; 5]);
        let err = bin_sentences(&corpus, 8, 0).unwrap_err();
        let Error::EmptyBins(msg) = err else { panic!() };
        assert!(msg.starts_with("10-14"), "{msg}");
        assert!(!msg.contains("5-9"));
    }

    #[test]
    fn shuffle_keeps_token_multiset() {
        let s = lines(&["a b c d e f g", "single"]);
        let out = make_shuffled_fold(&s, 4);
        assert_eq!(out[1], "single");
        let mut x: Vec<&str> = out[0].split(' ').collect();
        x.sort();
        assert_eq!(x, vec!["a", "b", "c", "d", "e", "f", "g"]);
    }

    #[test]
    fn gibberish_lengths_match() {
        let out = make_gibberish_fold(&[0, 5, 40], 1);
        let lens: Vec<usize> = out.iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![0, 5, 40]);
        assert!(out.iter().flat_map(|s| s.bytes()).all(|b| (0x20..0x7f).contains(&b)));
    }
}
