//! Dataset preparation, sweep protocols, the transfer and similarity
//! evaluations, and report emission.

pub mod cache;
pub mod data;
pub mod par;
pub mod similarity;
pub mod sweeps;
pub mod transfer;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::svec::load_svec_with_payload;

pub use cache::VectorCache;
pub use data::{
    bin_sentences, build_length_bins, make_gibberish_fold, make_shuffled_fold, sample_sentences,
    LengthBin, LengthBinnedSet, BIN_RANGES, DEFAULT_PER_BIN,
};
pub use similarity::{
    load_pairs, pooled_baseline, run_similarity_eval, similarity_eval, SimilarityPair,
    SimilarityReport,
};
pub use sweeps::{
    cell_label, default_dims, memorization_report, run_dimension_sweep, run_injection_sweep,
    run_prompt_baseline, run_seed_study, CellResult, MemorizationReport, SeedStudy, SweepHyper,
    SweepTable,
};
pub use transfer::{
    run_transfer_eval, Classifier, LabeledOutputs, LexiconClassifier, Sentiment, StyleSets,
    TransferCurve, LAMBDA_GRID,
};

/// Bytes needed to store a sentence as text versus as a steering vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub text_bytes: usize,
    pub payload_bytes: usize,
    pub file_bytes: u64,
    pub dim: usize,
    pub half_precision: bool,
}

pub fn storage_report(vector_file: &Path, target_text: &str) -> Result<StorageReport> {
    let (v, payload_bytes) = load_svec_with_payload(vector_file)?;
    let file_bytes = std::fs::metadata(vector_file)
        .map_err(|e| crate::Error::io(format!("reading {}", vector_file.display()), e))?
        .len();
    Ok(StorageReport {
        text_bytes: target_text.len(),
        payload_bytes,
        file_bytes,
        dim: v.dim(),
        half_precision: payload_bytes == 2 * v.dim(),
    })
}
