//! Sentence-level smoothed BLEU-4 over word tokens.
//!
//! Unigram precision is the plain clipped precision; bigram to 4-gram
//! precisions add one to both numerator and denominator. The brevity penalty
//! is `exp(1 - r/c)` when the candidate is not longer than the reference.

use std::collections::HashMap;

/// Splits punctuation into standalone tokens, then splits on whitespace.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Smoothed BLEU-4 in `[0, 100]`. Identical token sequences (including two
/// empty ones) score exactly 100.
pub fn bleu4_smoothed(candidate: &str, reference: &str) -> f64 {
    bleu4_tokens(&word_tokens(candidate), &word_tokens(reference))
}

pub fn bleu4_tokens(cand: &[String], refr: &[String]) -> f64 {
    if cand == refr {
        return 100.0;
    }
    let c = cand.len();
    let r = refr.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cc = ngram_counts(cand, n);
        let rc = ngram_counts(refr, n);
        let total = c.saturating_sub(n - 1);
        let matched: usize = cc
            .iter()
            .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    (100.0 * bp * log_sum.exp()).clamp(0.0, 100.0)
}
