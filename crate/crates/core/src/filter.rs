//! QE-driven bilingual corpus filtering.
//!
//! Every pair is scored with the sentence-level QE pipeline — the target
//! side is treated as the MT hypothesis — and the pairs with the highest
//! predicted HTER are dropped. When the corpus carries ground-truth
//! corruption flags, removal precision and recall are reported.

use crate::corpus::{ParallelPair, Vocabulary};
use crate::pipeline::PipelineError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("drop_fraction {0} must lie in [0,1)")]
    DropFraction(f64),
    #[error("flags length {got} does not match corpus size {expected}")]
    FlagLength { expected: usize, got: usize },
    #[error(transparent)]
    Pipeline(#[from] Box<PipelineError>),
}

/// Anything that can assign a predicted HTER to a sentence pair.
pub trait SentenceScorer {
    fn score(&self, source: &[String], mt: &[String]) -> Result<f64, PipelineError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub removed: usize,
    /// Pairs that could not be scored (scored 1.0 and flagged).
    pub unscoreable: usize,
    /// Fraction of removed pairs that were truly corrupted, when known.
    pub removal_precision: Option<f64>,
    /// Fraction of corrupted pairs that were removed, when known.
    pub removal_recall: Option<f64>,
}

#[derive(Debug)]
pub struct FilterOutcome {
    pub kept: Vec<ParallelPair>,
    pub removed: Vec<ParallelPair>,
    /// Original corpus indices of the removed pairs.
    pub removed_indices: Vec<usize>,
    /// Predicted HTER per original pair.
    pub scores: Vec<f64>,
    pub report: FilterReport,
}

/// Score, sort descending by predicted HTER (stable on ties, preserving
/// corpus order) and remove the top `drop_fraction`. Exactly
/// `floor(drop_fraction * n)` pairs are removed.
pub fn filter_corpus(
    pairs: &[ParallelPair],
    vocab: &Vocabulary,
    scorer: &dyn SentenceScorer,
    drop_fraction: f64,
    corrupted_flags: Option<&[bool]>,
) -> Result<FilterOutcome, FilterError> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(FilterError::DropFraction(drop_fraction));
    }
    if let Some(flags) = corrupted_flags {
        if flags.len() != pairs.len() {
            return Err(FilterError::FlagLength {
                expected: pairs.len(),
                got: flags.len(),
            });
        }
    }
    let mut unscoreable = 0usize;
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.source.is_empty() || pair.target.is_empty() {
            unscoreable += 1;
            scores.push(1.0);
            continue;
        }
        let src = vocab.decode(&pair.source);
        let mt = vocab.decode(&pair.target);
        scores.push(scorer.score(&src, &mt).map_err(Box::new)?);
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    // Stable sort: ties keep corpus order.
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
    });
    let n_remove = (drop_fraction * pairs.len() as f64).floor() as usize;
    let removed_indices: Vec<usize> = order[..n_remove].to_vec();
    let removed_set: std::collections::HashSet<usize> = removed_indices.iter().copied().collect();

    let mut kept = Vec::with_capacity(pairs.len() - n_remove);
    let mut removed = Vec::with_capacity(n_remove);
    for (i, pair) in pairs.iter().enumerate() {
        if removed_set.contains(&i) {
            removed.push(pair.clone());
        } else {
            kept.push(pair.clone());
        }
    }

    let (removal_precision, removal_recall) = match corrupted_flags {
        Some(flags) => {
            let true_positive = removed_indices.iter().filter(|&&i| flags[i]).count();
            let total_corrupted = flags.iter().filter(|f| **f).count();
            let precision = if n_remove > 0 {
                Some(true_positive as f64 / n_remove as f64)
            } else {
                None
            };
            let recall = if total_corrupted > 0 {
                Some(true_positive as f64 / total_corrupted as f64)
            } else {
                None
            };
            (precision, recall)
        }
        None => (None, None),
    };
    Ok(FilterOutcome {
        kept,
        removed,
        removed_indices,
        scores,
        report: FilterReport {
            total: pairs.len(),
            removed: n_remove,
            unscoreable,
            removal_precision,
            removal_recall,
        },
    })
}
