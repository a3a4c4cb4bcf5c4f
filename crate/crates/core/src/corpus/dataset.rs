//! QE sample construction from parallel pairs, with split statistics.

use super::{compute_hter, corrupt, CorpusError, CorruptionRates, ParallelPair, Tag, Vocabulary};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// One quality-estimation sample. Sentences are stored as word strings; the
/// vocabulary (with its merge table) turns them back into subword ids when a
/// model consumes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QESample {
    pub source: Vec<String>,
    pub mt: Vec<String>,
    /// Post-edit reference; absent at inference time.
    pub pe: Option<Vec<String>>,
    pub word_tags: Vec<Tag>,
    pub gap_tags: Vec<Tag>,
    pub hter: f64,
}

impl QESample {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.mt.is_empty() || self.source.is_empty() {
            return Err(CorpusError::EmptyInput);
        }
        if self.word_tags.len() != self.mt.len() {
            return Err(CorpusError::InvalidRates(format!(
                "word tag count {} != mt length {}",
                self.word_tags.len(),
                self.mt.len()
            )));
        }
        if self.gap_tags.len() != self.word_tags.len() + 1 {
            return Err(CorpusError::InvalidRates(format!(
                "gap tag count {} != word tag count {} + 1",
                self.gap_tags.len(),
                self.word_tags.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.hter) {
            return Err(CorpusError::InvalidRates(format!(
                "hter {} outside [0,1]",
                self.hter
            )));
        }
        Ok(())
    }

    pub fn bad_word_ratio(&self) -> f64 {
        let bad = self.word_tags.iter().filter(|t| **t == Tag::Bad).count();
        bad as f64 / self.word_tags.len() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QeDataset {
    pub train: Vec<QESample>,
    pub dev: Vec<QESample>,
    pub test: Vec<QESample>,
}

impl QeDataset {
    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            train: SplitStats::of(&self.train),
            dev: SplitStats::of(&self.dev),
            test: SplitStats::of(&self.test),
        }
    }
}

/// Per-split descriptive statistics: sample count, average lengths, HTER
/// range and BAD-token proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitStats {
    pub samples: usize,
    pub avg_src_len: f64,
    pub avg_mt_len: f64,
    pub avg_hter: f64,
    pub min_hter: f64,
    pub max_hter: f64,
    pub avg_bad_ratio: f64,
    pub min_bad_ratio: f64,
    pub max_bad_ratio: f64,
}

impl SplitStats {
    pub fn of(samples: &[QESample]) -> Self {
        if samples.is_empty() {
            return Self {
                samples: 0,
                avg_src_len: 0.0,
                avg_mt_len: 0.0,
                avg_hter: 0.0,
                min_hter: 0.0,
                max_hter: 0.0,
                avg_bad_ratio: 0.0,
                min_bad_ratio: 0.0,
                max_bad_ratio: 0.0,
            };
        }
        let n = samples.len() as f64;
        let mean = |f: &dyn Fn(&QESample) -> f64| samples.iter().map(|s| f(s)).sum::<f64>() / n;
        let min = |f: &dyn Fn(&QESample) -> f64| {
            samples.iter().map(|s| f(s)).fold(f64::INFINITY, f64::min)
        };
        let max = |f: &dyn Fn(&QESample) -> f64| {
            samples.iter().map(|s| f(s)).fold(f64::NEG_INFINITY, f64::max)
        };
        Self {
            samples: samples.len(),
            avg_src_len: mean(&|s| s.source.len() as f64),
            avg_mt_len: mean(&|s| s.mt.len() as f64),
            avg_hter: mean(&|s| s.hter),
            min_hter: min(&|s| s.hter),
            max_hter: max(&|s| s.hter),
            avg_bad_ratio: mean(&QESample::bad_word_ratio),
            min_bad_ratio: min(&QESample::bad_word_ratio),
            max_bad_ratio: max(&QESample::bad_word_ratio),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train: SplitStats,
    pub dev: SplitStats,
    pub test: SplitStats,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QeDataConfig {
    pub rates: CorruptionRates,
    /// Train/dev/test proportions; must sum to 1.
    pub split: (f64, f64, f64),
}

impl Default for QeDataConfig {
    fn default() -> Self {
        Self {
            rates: CorruptionRates {
                sub: 0.25,
                del: 0.08,
                ins: 0.06,
            },
            split: (0.7, 0.15, 0.15),
        }
    }
}

/// Build a labelled QE dataset: for each pair, the target becomes the
/// post-edit, a corrupted copy becomes the MT output, and HTER plus exact
/// word/gap tags come from the corruption itself. Splits are drawn after a
/// seeded shuffle.
pub fn make_qe_dataset(
    pairs: &[ParallelPair],
    vocab: &Vocabulary,
    config: QeDataConfig,
    seed: u64,
) -> Result<QeDataset, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    config.rates.validate()?;
    let (a, b, c) = config.split;
    if !((a + b + c) - 1.0).abs().le(&1e-9) || a <= 0.0 || b < 0.0 || c < 0.0 {
        return Err(CorpusError::InvalidRates(format!(
            "split fractions must be non-negative and sum to 1, got {:?}",
            config.split
        )));
    }
    let mut rng = SeededRng::derive(seed, "qe-dataset");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);

    let mut samples = Vec::with_capacity(pairs.len());
    for &idx in &order {
        let pair = &pairs[idx];
        let pe = &pair.target;
        // Retry until corruption leaves at least one token; the RNG stream
        // advances, so this stays a pure function of (seed, config).
        let (mt, word_tags, gap_tags) = loop {
            let out = corrupt(pe, config.rates, &mut rng, vocab)?;
            if !out.0.is_empty() {
                break out;
            }
        };
        let hter = compute_hter(&mt, pe)?;
        let sample = QESample {
            source: vocab.decode(&pair.source),
            mt: vocab.decode(&mt),
            pe: Some(vocab.decode(pe)),
            word_tags,
            gap_tags,
            hter,
        };
        sample.validate()?;
        samples.push(sample);
    }

    let n = samples.len();
    let n_train = ((n as f64) * a).round() as usize;
    let n_dev = ((n as f64) * b).round() as usize;
    let n_train = n_train.min(n);
    let n_dev = n_dev.min(n - n_train);
    let test = samples.split_off(n_train + n_dev);
    let dev = samples.split_off(n_train);
    Ok(QeDataset {
        train: samples,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_parallel;

    fn setup(n: usize) -> (Vocabulary, Vec<ParallelPair>) {
        let vocab = Vocabulary::synthetic(40, 1);
        let pairs = gen_parallel(100, n, &vocab, 1).unwrap();
        (vocab, pairs)
    }

    #[test]
    fn zero_corruption_gives_zero_hter_all_ok() {
        let (vocab, pairs) = setup(50);
        let cfg = QeDataConfig {
            rates: CorruptionRates::zero(),
            ..QeDataConfig::default()
        };
        let ds = make_qe_dataset(&pairs, &vocab, cfg, 1).unwrap();
        for s in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            assert_eq!(s.hter, 0.0);
            assert!(s.word_tags.iter().all(|t| *t == Tag::Ok));
            assert!(s.gap_tags.iter().all(|t| *t == Tag::Ok));
            assert_eq!(s.mt, s.pe.clone().unwrap());
        }
    }

    #[test]
    fn invariants_hold_for_every_sample() {
        let (vocab, pairs) = setup(200);
        let ds = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 7).unwrap();
        assert_eq!(ds.train.len() + ds.dev.len() + ds.test.len(), 200);
        for s in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            s.validate().unwrap();
            assert_eq!(s.gap_tags.len(), s.word_tags.len() + 1);
            assert!((0.0..=1.0).contains(&s.hter));
        }
    }

    #[test]
    fn stats_report_mirrors_expected_columns() {
        let (vocab, pairs) = setup(80);
        let ds = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 3).unwrap();
        let stats = ds.stats();
        assert_eq!(stats.train.samples, ds.train.len());
        assert!(stats.train.avg_hter >= stats.train.min_hter);
        assert!(stats.train.avg_hter <= stats.train.max_hter);
        assert!(stats.train.avg_bad_ratio > 0.0);
    }

    #[test]
    fn monte_carlo_hter_matches_substitution_rate() {
        let vocab = Vocabulary::synthetic(60, 1);
        let pairs = gen_parallel(42, 2000, &vocab, 1).unwrap();
        let cfg = QeDataConfig {
            rates: CorruptionRates {
                sub: 0.3,
                del: 0.0,
                ins: 0.0,
            },
            split: (1.0, 0.0, 0.0),
        };
        let ds = make_qe_dataset(&pairs, &vocab, cfg, 9).unwrap();
        let avg: f64 =
            ds.train.iter().map(|s| s.hter).sum::<f64>() / ds.train.len() as f64;
        assert!(
            (0.2..=0.4).contains(&avg),
            "average hter {avg} outside the expected band around 0.3"
        );
    }

    #[test]
    fn determinism_across_runs() {
        let (vocab, pairs) = setup(60);
        let a = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 5).unwrap();
        let b = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn emitted_tags_agree_with_alignment_oracle() {
        // Reconstruct tags independently by aligning mt against pe with an
        // edit-distance backtrace; emitted tags must agree on >= 95% of
        // word positions over a large sample.
        let (vocab, pairs) = setup(1000);
        let ds = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 11).unwrap();
        let mut agree = 0usize;
        let mut total = 0usize;
        for s in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            let pe = s.pe.as_ref().unwrap();
            let oracle = alignment_tags(&s.mt, pe);
            for (a, b) in oracle.iter().zip(&s.word_tags) {
                total += 1;
                if a == b {
                    agree += 1;
                }
            }
        }
        let ratio = agree as f64 / total as f64;
        assert!(ratio >= 0.95, "tag agreement {ratio} below 0.95");
    }

    /// Independent oracle: word tags from a Levenshtein alignment backtrace
    /// (match => OK, substitution/insertion-in-mt => BAD).
    fn alignment_tags(mt: &[String], pe: &[String]) -> Vec<Tag> {
        let n = mt.len();
        let m = pe.len();
        let mut dp = vec![vec![0usize; m + 1]; n + 1];
        for i in 0..=n {
            dp[i][0] = i;
        }
        for j in 0..=m {
            dp[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let sub = dp[i - 1][j - 1] + usize::from(mt[i - 1] != pe[j - 1]);
                dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
            }
        }
        let mut tags = vec![Tag::Ok; n];
        let (mut i, mut j) = (n, m);
        while i > 0 {
            if j > 0 && dp[i][j] == dp[i - 1][j - 1] + usize::from(mt[i - 1] != pe[j - 1]) {
                tags[i - 1] = if mt[i - 1] == pe[j - 1] {
                    Tag::Ok
                } else {
                    Tag::Bad
                };
                i -= 1;
                j -= 1;
            } else if dp[i][j] == dp[i - 1][j] + 1 {
                // Token present in mt but not pe: a spurious word.
                tags[i - 1] = Tag::Bad;
                i -= 1;
            } else {
                j -= 1;
            }
        }
        tags
    }
}
