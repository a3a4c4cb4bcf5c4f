//! Evaluation metrics: Pearson, MAE/RMSE, MCC, per-class F1, combined
//! word+gap scoring and corpus-level BLEU.

use crate::corpus::Tag;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::hash::Hash;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("zero variance in the {0} argument; correlation undefined")]
    ZeroVariance(&'static str),
    #[error("sentence {index}: predicted {what} count {got} does not match gold {expected}")]
    Misaligned {
        index: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("reference {index} is empty")]
    EmptyReference { index: usize },
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(EvalError::TooFew { need: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    if var_a == 0.0 {
        return Err(EvalError::ZeroVariance("first"));
    }
    if var_b == 0.0 {
        return Err(EvalError::ZeroVariance("second"));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Mean absolute error and root mean squared error.
pub fn mae_rmse(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    let n = a.len() as f64;
    let mae = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok((mae, mse.sqrt()))
}

/// Binary confusion counts with BAD as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_tags(gold: &[Tag], predicted: &[Tag]) -> Result<Self, EvalError> {
        if gold.len() != predicted.len() {
            return Err(EvalError::LengthMismatch {
                a: gold.len(),
                b: predicted.len(),
            });
        }
        let mut c = Confusion::default();
        for (&g, &p) in gold.iter().zip(predicted) {
            match (g, p) {
                (Tag::Bad, Tag::Bad) => c.tp += 1,
                (Tag::Ok, Tag::Bad) => c.fp += 1,
                (Tag::Ok, Tag::Ok) => c.tn += 1,
                (Tag::Bad, Tag::Ok) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Matthews correlation; a zero denominator yields 0 by convention.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (
            self.tp as f64,
            self.fp as f64,
            self.tn as f64,
            self.fn_ as f64,
        );
        let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom
        }
    }

    /// (f1_bad, f1_ok); an empty class scores 0 by convention.
    pub fn f1_scores(&self) -> (f64, f64) {
        let f1 = |tp: f64, fp: f64, fn_: f64| {
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        };
        let f1_bad = f1(self.tp as f64, self.fp as f64, self.fn_ as f64);
        // For the OK class the confusion roles swap.
        let f1_ok = f1(self.tn as f64, self.fn_ as f64, self.fp as f64);
        (f1_bad, f1_ok)
    }
}

pub fn mcc(gold: &[Tag], predicted: &[Tag]) -> Result<f64, EvalError> {
    Ok(Confusion::from_tags(gold, predicted)?.mcc())
}

pub fn f1_scores(gold: &[Tag], predicted: &[Tag]) -> Result<(f64, f64), EvalError> {
    Ok(Confusion::from_tags(gold, predicted)?.f1_scores())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceEvalReport {
    pub pearson: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn sentence_eval(gold: &[f64], predicted: &[f64]) -> Result<SentenceEvalReport, EvalError> {
    let r = pearson(gold, predicted)?;
    let (mae, rmse) = mae_rmse(gold, predicted)?;
    Ok(SentenceEvalReport {
        pearson: r,
        mae,
        rmse,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordEvalReport {
    pub mcc: f64,
    pub f1_bad: f64,
    pub f1_ok: f64,
    pub confusion: Confusion,
}

/// Combined word-level evaluation: per sentence, the word tags followed by
/// the gap tags are concatenated into one sequence pair, and MCC/F1 are
/// computed over the whole combined population.
pub fn word_level_eval(
    gold: &[(Vec<Tag>, Vec<Tag>)],
    predicted: &[(Vec<Tag>, Vec<Tag>)],
) -> Result<WordEvalReport, EvalError> {
    if gold.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            a: gold.len(),
            b: predicted.len(),
        });
    }
    let mut flat_gold = Vec::new();
    let mut flat_pred = Vec::new();
    for (i, ((gw, gg), (pw, pg))) in gold.iter().zip(predicted).enumerate() {
        if gw.len() != pw.len() {
            return Err(EvalError::Misaligned {
                index: i,
                what: "word tag",
                expected: gw.len(),
                got: pw.len(),
            });
        }
        if gg.len() != pg.len() {
            return Err(EvalError::Misaligned {
                index: i,
                what: "gap tag",
                expected: gg.len(),
                got: pg.len(),
            });
        }
        flat_gold.extend_from_slice(gw);
        flat_gold.extend_from_slice(gg);
        flat_pred.extend_from_slice(pw);
        flat_pred.extend_from_slice(pg);
    }
    let confusion = Confusion::from_tags(&flat_gold, &flat_pred)?;
    let (f1_bad, f1_ok) = confusion.f1_scores();
    Ok(WordEvalReport {
        mcc: confusion.mcc(),
        f1_bad,
        f1_ok,
        confusion,
    })
}

/// Corpus-level BLEU in [0, 1]: geometric mean of modified n-gram precisions
/// for n = 1..=max_n with a brevity penalty, counted over the whole corpus.
/// No smoothing: a zero precision at any order gives 0.
pub fn corpus_bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            a: hypotheses.len(),
            b: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    for (i, r) in references.iter().enumerate() {
        if r.is_empty() {
            return Err(EvalError::EmptyReference { index: i });
        }
    }
    assert!(max_n >= 1, "corpus_bleu needs max_n >= 1");

    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in &hyp_counts {
                let clipped = (*count).min(ref_counts.get(gram).copied().unwrap_or(0));
                matches[n - 1] += clipped;
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(brevity * (log_precision_sum / max_n as f64).exp())
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: Tag = Tag::Bad;
    const O: Tag = Tag::Ok;

    #[test]
    fn pearson_perfect_and_inverted() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = [3.0, 2.0, 1.0];
        assert!((pearson(&a, &inv).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_closed_form() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 2.0, 4.0];
        let expected = 9.0 / 84f64.sqrt();
        assert!((pearson(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn pearson_affine_invariance() {
        let a = [0.3, 0.9, 0.1, 0.7, 0.5];
        let b = [0.2, 0.8, 0.3, 0.9, 0.4];
        let scaled: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        let r1 = pearson(&a, &b).unwrap();
        let r2 = pearson(&scaled, &b).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance_rejected() {
        let flat = [2.0, 2.0, 2.0];
        let b = [1.0, 2.0, 3.0];
        assert!(matches!(
            pearson(&flat, &b),
            Err(EvalError::ZeroVariance("first"))
        ));
    }

    #[test]
    fn mae_rmse_examples() {
        let zero = mae_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(zero, (0.0, 0.0));
        let sym = mae_rmse(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(sym, (1.0, 1.0));
        let (mae, rmse) = mae_rmse(&[3.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert!((mae - 0.75).abs() < 1e-12);
        assert!((rmse - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mcc_examples() {
        let gold = [B, B, O, O];
        assert!((mcc(&gold, &gold).unwrap() - 1.0).abs() < 1e-12);
        let flipped = [O, O, B, B];
        assert!((mcc(&gold, &flipped).unwrap() + 1.0).abs() < 1e-12);
        // TP=2, TN=2, FP=1, FN=1 -> 3/9.
        let g = [B, B, B, O, O, O];
        let p = [B, B, O, B, O, O];
        assert!((mcc(&g, &p).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        let gold = [B, B, O, O];
        assert_eq!(f1_scores(&gold, &gold).unwrap(), (1.0, 1.0));
        let pred = [B, O, O, O];
        let (f1_bad, f1_ok) = f1_scores(&gold, &pred).unwrap();
        assert!((f1_bad - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1_ok - 0.8).abs() < 1e-12);
        // All-OK on both sides: empty BAD class scores 0 by convention.
        let all_ok = [O, O, O];
        assert_eq!(f1_scores(&all_ok, &all_ok).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn label_swap_symmetry() {
        let gold = [B, O, B, O, O, B, O];
        let pred = [B, B, O, O, B, B, O];
        let (f1_bad, f1_ok) = f1_scores(&gold, &pred).unwrap();
        let swap = |tags: &[Tag]| -> Vec<Tag> {
            tags.iter().map(|t| if *t == B { O } else { B }).collect()
        };
        let (s_bad, s_ok) = f1_scores(&swap(&gold), &swap(&pred)).unwrap();
        assert!((f1_bad - s_ok).abs() < 1e-12);
        assert!((f1_ok - s_bad).abs() < 1e-12);
        let m = mcc(&gold, &pred).unwrap();
        let ms = mcc(&swap(&gold), &swap(&pred)).unwrap();
        assert!((m.abs() - ms.abs()).abs() < 1e-12);
    }

    #[test]
    fn word_level_eval_concatenates_words_then_gaps() {
        let gold = vec![(vec![B, O], vec![O, O, B])];
        let pred = vec![(vec![B, O], vec![O, O, B])];
        let report = word_level_eval(&gold, &pred).unwrap();
        assert_eq!(report.confusion.total(), 5);
        assert!((report.mcc - 1.0).abs() < 1e-12);

        // Agreement with the manually concatenated flat lists.
        let flat_gold = [B, O, O, O, B];
        let flat_pred = [B, O, O, O, B];
        assert_eq!(report.mcc, mcc(&flat_gold, &flat_pred).unwrap());
    }

    #[test]
    fn word_level_eval_rejects_misalignment() {
        let gold = vec![(vec![B, O], vec![O, O, B])];
        let pred = vec![(vec![B], vec![O, O, B])];
        assert!(matches!(
            word_level_eval(&gold, &pred),
            Err(EvalError::Misaligned { index: 0, .. })
        ));
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = vec![toks("a b c d e"), toks("x y z w")];
        assert!((corpus_bleu(&refs, &refs, 4).unwrap() - 1.0).abs() < 1e-12);
        let bad = vec![toks("q q q q q"), toks("p p p p")];
        assert_eq!(corpus_bleu(&bad, &refs, 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_zero_fourgram_gives_zero_unsmoothed() {
        // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0 -> BLEU 0.
        let hyp = vec![toks("a b c d")];
        let reference = vec![toks("a b c e")];
        assert_eq!(corpus_bleu(&hyp, &reference, 4).unwrap(), 0.0);
        // The same pair at max_n = 3 uses exactly those precisions.
        let b3 = corpus_bleu(&hyp, &reference, 3).unwrap();
        let expected = ((3f64 / 4.0).ln() + (2f64 / 3.0).ln() + (1f64 / 2.0).ln()) / 3.0;
        assert!((b3 - expected.exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        let hyp = vec![toks("a b")];
        let reference = vec![toks("a b c d")];
        let b = corpus_bleu(&hyp, &reference, 2).unwrap();
        let expected = (1.0f64 - 2.0).exp();
        assert!((b - expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_rejects_count_mismatch_and_empty_reference() {
        let hyp = vec![toks("a")];
        assert!(corpus_bleu(&hyp, &[], 4).is_err());
        let empty_ref: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(
            corpus_bleu(&hyp, &empty_ref, 4),
            Err(EvalError::EmptyReference { index: 0 })
        ));
    }
}
