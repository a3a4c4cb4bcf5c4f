//! Minimal byte-pair-encoding trainer and segmenter.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Ordered list of merge rules; applying `segment` then joining the pieces
/// reproduces the original word.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeTable {
    pub rules: Vec<(String, String)>,
}

/// Greedy most-frequent-pair merges over character symbols. Ties break
/// lexicographically by pair, which makes retraining deterministic.
pub fn train_bpe(word_frequencies: &HashMap<String, u64>, num_merges: usize) -> MergeTable {
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut sorted: Vec<(&String, &u64)> = word_frequencies.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        sorted
            .into_iter()
            .map(|(w, &f)| (w.chars().map(String::from).collect(), f))
            .collect()
    };
    let mut rules = Vec::new();
    for _ in 0..num_merges {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, _)) = best else { break };
        for (symbols, _) in &mut words {
            merge_pair(symbols, &pair.0, &pair.1);
        }
        rules.push(pair);
    }
    MergeTable { rules }
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let joined = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = joined;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Split a word into subwords by applying the merge rules in order.
/// Characters never seen in training simply stay single-character symbols.
pub fn segment(word: &str, merges: &MergeTable) -> Vec<String> {
    assert!(!word.is_empty(), "segment of empty word");
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    for (left, right) in &merges.rules {
        merge_pair(&mut symbols, left, right);
    }
    symbols
}

/// Segment every word of a sentence, annotating each subword with the index
/// of its parent word.
pub fn segment_sentence(words: &[String], merges: &MergeTable) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (w, word) in words.iter().enumerate() {
        for sub in segment(word, merges) {
            out.push((sub, w));
        }
    }
    out
}
