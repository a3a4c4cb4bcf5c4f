//! Synthetic parallel corpus with controllable one-to-many translation.
//!
//! A target sentence is a deterministic function of its source and a latent
//! style: reverse the source, then apply the style's bijective token map.
//! Distinct styles use distinct maps, so one source genuinely admits several
//! valid translations — the structure the mixture experts are meant to
//! capture.

use super::{CorpusError, Vocabulary};
use crate::rng::SeededRng;

pub const MIN_LEN: usize = 4;
pub const MAX_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// Latent style the target was generated with, when known.
    pub style_id: Option<usize>,
}

/// Per-style bijective maps over the content token range.
#[derive(Debug, Clone)]
pub struct StyleMaps {
    /// `maps[s][id - content_start]` is the image of `id` under style s.
    maps: Vec<Vec<u32>>,
    content_start: u32,
}

impl StyleMaps {
    pub fn style_count(&self) -> usize {
        self.maps.len()
    }

    pub fn apply(&self, style: usize, id: u32) -> u32 {
        self.maps[style][(id - self.content_start) as usize]
    }

    /// The translation rule: reverse, then map token-wise.
    pub fn translate(&self, style: usize, source: &[u32]) -> Vec<u32> {
        source
            .iter()
            .rev()
            .map(|&id| self.apply(style, id))
            .collect()
    }
}

fn distinct_permutation_bound(n: usize) -> u128 {
    let mut total: u128 = 1;
    for i in 2..=n as u128 {
        total = total.saturating_mul(i);
        if total > u128::from(u64::MAX) {
            return total;
        }
    }
    total
}

/// Draw `style_count` pairwise-distinct bijections, rejecting duplicates.
pub fn style_maps(
    seed: u64,
    vocab: &Vocabulary,
    style_count: usize,
) -> Result<StyleMaps, CorpusError> {
    let n = vocab.content_size();
    let available = distinct_permutation_bound(n);
    if style_count as u128 > available {
        return Err(CorpusError::TooManyStyles {
            requested: style_count,
            available,
        });
    }
    let mut rng = SeededRng::derive(seed, "style-maps");
    let start = vocab.content_start();
    let mut maps: Vec<Vec<u32>> = Vec::with_capacity(style_count);
    while maps.len() < style_count {
        let perm: Vec<u32> = rng
            .permutation(n)
            .into_iter()
            .map(|i| start + i as u32)
            .collect();
        if !maps.contains(&perm) {
            maps.push(perm);
        }
    }
    Ok(StyleMaps {
        maps,
        content_start: start,
    })
}

/// Generate a corpus of style-tagged pairs. Sources are uniform random
/// content-token sequences of length 4–12; each pair samples a style
/// uniformly. Pure function of `(seed, n_pairs, vocab, style_count)`.
pub fn gen_parallel(
    seed: u64,
    n_pairs: usize,
    vocab: &Vocabulary,
    style_count: usize,
) -> Result<Vec<ParallelPair>, CorpusError> {
    assert!(n_pairs >= 1, "need at least one pair");
    assert!(style_count >= 1, "need at least one style");
    let maps = style_maps(seed, vocab, style_count)?;
    let mut rng = SeededRng::derive(seed, "pairs");
    let start = vocab.content_start();
    let n_content = vocab.content_size();
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.usize_in(MIN_LEN, MAX_LEN);
        let source: Vec<u32> = (0..len)
            .map(|_| start + rng.usize_below(n_content) as u32)
            .collect();
        let style = rng.usize_below(style_count);
        let target = maps.translate(style, &source);
        out.push(ParallelPair {
            source,
            target,
            style_id: Some(style),
        });
    }
    Ok(out)
}
