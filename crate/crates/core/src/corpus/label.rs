//! QE label synthesis: HTER scores and word/gap OK-BAD tags.

use super::{CorpusError, Vocabulary};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// Word-level or gap-level quality tag. BAD marks a mistranslated word, or a
/// gap where one or more missing words should be inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    Ok,
    Bad,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Ok => "OK",
            Tag::Bad => "BAD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "OK" => Some(Tag::Ok),
            "BAD" => Some(Tag::Bad),
            _ => None,
        }
    }
}

/// Word-level Levenshtein distance (substitutions, insertions, deletions,
/// all cost 1), rolling single-row formulation.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ai) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let cost = if ai == bj { diag } else { diag + 1 };
            diag = row[j + 1];
            row[j + 1] = cost.min(row[j] + 1).min(row[j + 1] + 1);
        }
    }
    row[b.len()]
}

/// HTER: edit operations needed to turn `mt` into `pe`, divided by the MT
/// sentence length and clamped to [0, 1].
///
/// Note the denominator: this follows the convention of dividing by the
/// translation length. Much of the TER literature divides by the reference
/// length instead; on equal-length pairs the two coincide.
pub fn compute_hter<T: PartialEq>(mt: &[T], pe: &[T]) -> Result<f64, CorpusError> {
    if mt.is_empty() {
        return Err(CorpusError::EmptyMt);
    }
    let d = levenshtein(mt, pe) as f64;
    Ok((d / mt.len() as f64).clamp(0.0, 1.0))
}

/// Per-position corruption probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRates {
    /// Probability a kept position is replaced by a random other token.
    pub sub: f64,
    /// Probability a position is dropped (tags the straddling gap BAD).
    pub del: f64,
    /// Probability of inserting a random BAD token before a position (and
    /// once more after the last position).
    pub ins: f64,
}

impl CorruptionRates {
    pub fn zero() -> Self {
        Self {
            sub: 0.0,
            del: 0.0,
            ins: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(in_unit(self.sub) && in_unit(self.del) && in_unit(self.ins)) {
            return Err(CorpusError::InvalidRates(format!(
                "each rate must lie in [0,1], got sub={} del={} ins={}",
                self.sub, self.del, self.ins
            )));
        }
        if self.sub + self.del > 1.0 {
            return Err(CorpusError::InvalidRates(format!(
                "sub + del must not exceed 1, got {}",
                self.sub + self.del
            )));
        }
        Ok(())
    }
}

fn random_other_token(rng: &mut SeededRng, vocab: &Vocabulary, avoid: u32) -> u32 {
    let start = vocab.content_start();
    let n = vocab.content_size();
    if n <= 1 {
        return avoid;
    }
    let pick = rng.usize_below(n - 1) as u32 + start;
    if pick >= avoid {
        pick + 1
    } else {
        pick
    }
}

fn random_token(rng: &mut SeededRng, vocab: &Vocabulary) -> u32 {
    vocab.content_start() + rng.usize_below(vocab.content_size()) as u32
}

/// Corrupt a post-edit into a machine translation, recording exact tags.
///
/// Walks the sentence once. Before each position (and after the last), a
/// random token may be inserted (word tag BAD). The position itself is then
/// substituted (word tag BAD), deleted (the straddling gap tagged BAD: one
/// or more words are missing there), or kept (word tag OK). Tags are emitted
/// by the corruption itself, so they describe the edits exactly; alignment
/// against the post-edit is only a cross-check.
///
/// Returns `(mt, word_tags, gap_tags)` with `gap_tags.len() == mt.len() + 1`.
/// `mt` may come back empty when every position is deleted; callers that
/// need a scoreable sentence must retry or filter.
pub fn corrupt(
    pe: &[u32],
    rates: CorruptionRates,
    rng: &mut SeededRng,
    vocab: &Vocabulary,
) -> Result<(Vec<u32>, Vec<Tag>, Vec<Tag>), CorpusError> {
    rates.validate()?;
    let mut mt = Vec::with_capacity(pe.len());
    let mut word_tags = Vec::with_capacity(pe.len());
    let mut gap_tags = vec![Tag::Ok];
    for &token in pe {
        if rates.ins > 0.0 && rng.chance(rates.ins) {
            mt.push(random_token(rng, vocab));
            word_tags.push(Tag::Bad);
            gap_tags.push(Tag::Ok);
        }
        let u = rng.f64();
        if u < rates.sub {
            mt.push(random_other_token(rng, vocab, token));
            word_tags.push(Tag::Bad);
            gap_tags.push(Tag::Ok);
        } else if u < rates.sub + rates.del {
            *gap_tags.last_mut().expect("gap list never empty") = Tag::Bad;
        } else {
            mt.push(token);
            word_tags.push(Tag::Ok);
            gap_tags.push(Tag::Ok);
        }
    }
    if rates.ins > 0.0 && rng.chance(rates.ins) {
        mt.push(random_token(rng, vocab));
        word_tags.push(Tag::Bad);
        gap_tags.push(Tag::Ok);
    }
    debug_assert_eq!(gap_tags.len(), word_tags.len() + 1);
    Ok((mt, word_tags, gap_tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hter_reference_example() {
        // 许多 蝴蝶 在 花草 间 飘动 .  vs  许多 蝴蝶 在 花草 丛中 飞舞 。
        let mt = ["许多", "蝴蝶", "在", "花草", "间", "飘动", "."];
        let pe = ["许多", "蝴蝶", "在", "花草", "丛中", "飞舞", "。"];
        let h = compute_hter(&mt, &pe).unwrap();
        assert!((h - 0.4286).abs() < 1e-4, "got {h}");
    }

    #[test]
    fn identical_sentences_zero() {
        let s = ["a", "b", "c"];
        assert_eq!(compute_hter(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn substitution_plus_insertion() {
        let mt = ["a", "b", "c"];
        let pe = ["a", "x", "c", "d"];
        let h = compute_hter(&mt, &pe).unwrap();
        assert!((h - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mt_rejected() {
        let mt: [&str; 0] = [];
        assert!(matches!(
            compute_hter(&mt, &["a"]),
            Err(CorpusError::EmptyMt)
        ));
    }

    #[test]
    fn distance_is_symmetric_ratio_is_not() {
        let a = ["x", "y"];
        let b = ["x", "y", "z", "w"];
        assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        let h_ab = compute_hter(&a, &b).unwrap();
        let h_ba = compute_hter(&b, &a).unwrap();
        // Same distance, different denominators.
        assert!((h_ab * a.len() as f64 - h_ba * b.len() as f64).abs() < 1e-12);
        assert_ne!(h_ab, h_ba);
    }

    #[test]
    fn zero_rates_copy_everything() {
        let vocab = Vocabulary::synthetic(20, 1);
        let mut rng = SeededRng::new(1);
        let pe: Vec<u32> = (0..6).map(|i| vocab.content_start() + i).collect();
        let (mt, words, gaps) =
            corrupt(&pe, CorruptionRates::zero(), &mut rng, &vocab).unwrap();
        assert_eq!(mt, pe);
        assert!(words.iter().all(|t| *t == Tag::Ok));
        assert!(gaps.iter().all(|t| *t == Tag::Ok));
    }

    #[test]
    fn full_substitution_all_words_bad_gaps_ok() {
        let vocab = Vocabulary::synthetic(20, 1);
        let mut rng = SeededRng::new(2);
        let pe: Vec<u32> = (0..8).map(|i| vocab.content_start() + i).collect();
        let rates = CorruptionRates {
            sub: 1.0,
            del: 0.0,
            ins: 0.0,
        };
        let (mt, words, gaps) = corrupt(&pe, rates, &mut rng, &vocab).unwrap();
        assert_eq!(mt.len(), pe.len());
        assert!(words.iter().all(|t| *t == Tag::Bad));
        assert!(gaps.iter().all(|t| *t == Tag::Ok));
        assert!(mt.iter().zip(&pe).all(|(a, b)| a != b));
    }

    #[test]
    fn deletion_tags_straddling_gap() {
        let vocab = Vocabulary::synthetic(20, 1);
        let mut rng = SeededRng::new(3);
        let pe: Vec<u32> = (0..4).map(|i| vocab.content_start() + i).collect();
        let rates = CorruptionRates {
            sub: 0.0,
            del: 1.0,
            ins: 0.0,
        };
        let (mt, words, gaps) = corrupt(&pe, rates, &mut rng, &vocab).unwrap();
        assert!(mt.is_empty());
        assert!(words.is_empty());
        assert_eq!(gaps, vec![Tag::Bad]);
    }

    #[test]
    fn invalid_rates_rejected() {
        let vocab = Vocabulary::synthetic(5, 1);
        let mut rng = SeededRng::new(4);
        let bad = CorruptionRates {
            sub: 0.8,
            del: 0.4,
            ins: 0.0,
        };
        assert!(corrupt(&[9, 9], bad, &mut rng, &vocab).is_err());
    }
}
