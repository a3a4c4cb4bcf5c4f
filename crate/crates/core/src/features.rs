//! Per-token QE feature assembly for the NMT and XLM predictor streams.
//!
//! For each target token the NMT stream contributes K expert slots of
//! (model-derived feature ∥ dual-model feature ∥ 4-dim mismatch vector),
//! giving a width of K·(2d+4) — 5140 at the reference scale K=5, d=512. The
//! XLM stream computes one slot from its hidden states and pseudo-likelihood
//! distributions; lacking a dual model, it replicates the model-derived
//! block into the dual position and tiles the slot K times so both streams
//! are width-equal for the shared estimator.

use crate::corpus::Vocabulary;
use crate::nmt::{DualPredictor, NmtError};
use crate::nn::Scalar;
use crate::xlm::{XlmError, XlmModel};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MISMATCH_DIM: usize = 4;
/// Probabilities are floored here before taking logs, keeping features
/// finite.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("vector length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty sentence")]
    Empty,
    #[error("feature width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("alignment must cover rows contiguously from word 0")]
    BadAlignment,
    #[error(transparent)]
    Nmt(#[from] NmtError),
    #[error(transparent)]
    Xlm(#[from] XlmError),
    #[error("feature file: {0}")]
    File(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four mismatch statistics of one token against a predictor
/// distribution: log p(y_mt|x), log p(y_max|x), their difference (always
/// ≤ 0) and an exact-match indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchVector<F: Scalar> {
    pub log_p_mt: F,
    pub log_p_max: F,
    pub diff: F,
    pub exact_match: F,
}

impl<F: Scalar> MismatchVector<F> {
    pub fn to_array(self) -> [F; MISMATCH_DIM] {
        [self.log_p_mt, self.log_p_max, self.diff, self.exact_match]
    }
}

/// Argmax with ties broken toward the lowest token id.
fn argmax<F: Scalar>(dist: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in dist.iter().enumerate() {
        if *v > dist[best] {
            best = i;
        }
    }
    best
}

/// Mismatch features of one position. `dist` must sum to 1 over the
/// vocabulary; `y_mt` is the token actually present in the translation.
pub fn mismatch_features<F: Scalar>(dist: &[F], y_mt: usize) -> MismatchVector<F> {
    assert!(y_mt < dist.len(), "token id {y_mt} outside distribution");
    let floor = F::from_f64(LOG_PROB_FLOOR);
    let y_max = argmax(dist);
    let log_p_mt = dist[y_mt].maximum(floor).ln();
    let log_p_max = dist[y_max].maximum(floor).ln();
    MismatchVector {
        log_p_mt,
        log_p_max,
        diff: log_p_mt - log_p_max,
        exact_match: if y_mt == y_max { F::one() } else { F::zero() },
    }
}

/// Model-derived feature: decoder state ⊙ embedding of the actual token.
pub fn model_feature<F: Scalar>(state: &[F], embedding: &[F]) -> Result<Vec<F>, FeatureError> {
    if state.len() != embedding.len() {
        return Err(FeatureError::LengthMismatch {
            a: state.len(),
            b: embedding.len(),
        });
    }
    Ok(state
        .iter()
        .zip(embedding)
        .map(|(z, e)| *z * *e)
        .collect())
}

/// Dual-model feature: source-free target encoding ⊙ token embedding. Same
/// algebra as [`model_feature`]; the distinction is which state goes in.
pub fn dual_feature<F: Scalar>(encoding: &[F], embedding: &[F]) -> Result<Vec<F>, FeatureError> {
    model_feature(encoding, embedding)
}

/// Plain dense feature matrix (word- or gap-level).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<F: Scalar> {
    pub rows: usize,
    pub width: usize,
    pub values: Vec<F>,
}

impl<F: Scalar> FeatureMatrix<F> {
    pub fn new(rows: usize, width: usize, values: Vec<F>) -> Self {
        assert_eq!(rows * width, values.len());
        Self {
            rows,
            width,
            values,
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

/// Subword-level feature matrix with the token→word alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatureMatrix<F: Scalar> {
    pub matrix: FeatureMatrix<F>,
    /// Parent word index per subword row; non-decreasing, contiguous from 0.
    pub word_alignment: Vec<usize>,
}

impl<F: Scalar> TokenFeatureMatrix<F> {
    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn width(&self) -> usize {
        self.matrix.width
    }

    fn check_alignment(alignment: &[usize]) -> Result<(), FeatureError> {
        let mut prev = 0usize;
        for (i, &a) in alignment.iter().enumerate() {
            let ok = if i == 0 { a == 0 } else { a == prev || a == prev + 1 };
            if !ok {
                return Err(FeatureError::BadAlignment);
            }
            prev = a;
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.word_alignment.last().map(|w| w + 1).unwrap_or(0)
    }

    /// Mean-pool subword rows that belong to the same word.
    pub fn pool_to_words(&self) -> FeatureMatrix<F> {
        let w = self.word_count();
        let width = self.width();
        let mut sums = vec![F::zero(); w * width];
        let mut counts = vec![0usize; w];
        for (i, &word) in self.word_alignment.iter().enumerate() {
            counts[word] += 1;
            let src = self.matrix.row(i);
            let dst = &mut sums[word * width..(word + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
        for (word, &c) in counts.iter().enumerate() {
            let inv = F::from_f64(1.0 / c as f64);
            for v in &mut sums[word * width..(word + 1) * width] {
                *v *= inv;
            }
        }
        FeatureMatrix::new(w, width, sums)
    }
}

/// Gap features from an (already word-pooled) matrix: gap i is the mean of
/// its adjacent words' features; the two boundary gaps copy their single
/// neighbour. n words give n+1 gaps.
pub fn gap_features<F: Scalar>(words: &FeatureMatrix<F>) -> Result<FeatureMatrix<F>, FeatureError> {
    if words.rows == 0 {
        return Err(FeatureError::Empty);
    }
    let n = words.rows;
    let width = words.width;
    let mut values = Vec::with_capacity((n + 1) * width);
    values.extend_from_slice(words.row(0));
    let half = F::from_f64(0.5);
    for gap in 1..n {
        let left = words.row(gap - 1);
        let right = words.row(gap);
        values.extend(left.iter().zip(right).map(|(a, b)| (*a + *b) * half));
    }
    values.extend_from_slice(words.row(n - 1));
    Ok(FeatureMatrix::new(n + 1, width, values))
}

/// Slot and total widths of the per-token feature layout.
pub fn feature_width(expert_count: usize, d: usize, include_dual: bool) -> usize {
    expert_count * slot_width(d, include_dual)
}

pub fn slot_width(d: usize, include_dual: bool) -> usize {
    d * (1 + usize::from(include_dual)) + MISMATCH_DIM
}

/// NMT-stream features: K expert slots per target token. The decoder states
/// and distributions are expert-conditioned; the dual encoding (EncB over
/// the target alone) consumes no expert token and is computed once, then
/// replicated into each slot.
pub fn assemble_nmt_features<F: Scalar>(
    predictor: &DualPredictor<F>,
    x: &[u32],
    y: &[u32],
    word_alignment: &[usize],
    include_dual: bool,
) -> Result<TokenFeatureMatrix<F>, FeatureError> {
    if y.is_empty() {
        return Err(FeatureError::Empty);
    }
    if word_alignment.len() != y.len() {
        return Err(FeatureError::LengthMismatch {
            a: word_alignment.len(),
            b: y.len(),
        });
    }
    TokenFeatureMatrix::<F>::check_alignment(word_alignment)?;
    let k = predictor.cfg.expert_count;
    let d = predictor.cfg.d;
    let width = feature_width(k, d, include_dual);

    let dual_rows: Option<Vec<Vec<F>>> =
        include_dual.then(|| predictor.target_encoding(y)).transpose()?;
    let mut per_expert = Vec::with_capacity(k);
    for z in 0..k {
        per_expert.push(predictor.states_and_distributions(x, y, z)?);
    }

    let mut values = Vec::with_capacity(y.len() * width);
    for (i, &token) in y.iter().enumerate() {
        let emb = predictor.embedding_row(token);
        for (states, dists) in &per_expert {
            values.extend(model_feature(&states[i], emb)?);
            if let Some(dual) = &dual_rows {
                values.extend(dual_feature(&dual[i], emb)?);
            }
            values.extend(mismatch_features(&dists[i], token as usize).to_array());
        }
    }
    Ok(TokenFeatureMatrix {
        matrix: FeatureMatrix::new(y.len(), width, values),
        word_alignment: word_alignment.to_vec(),
    })
}

/// XLM-stream features, width-matched to the NMT stream: the single slot
/// (hidden state ⊙ embedding, the same block replicated into the dual
/// position, pseudo-likelihood mismatch stats) tiled over all K expert
/// slots.
pub fn assemble_xlm_features<F: Scalar>(
    xlm: &XlmModel<F>,
    x: &[u32],
    y: &[u32],
    word_alignment: &[usize],
    expert_count: usize,
    include_dual: bool,
) -> Result<TokenFeatureMatrix<F>, FeatureError> {
    if y.is_empty() {
        return Err(FeatureError::Empty);
    }
    if word_alignment.len() != y.len() {
        return Err(FeatureError::LengthMismatch {
            a: word_alignment.len(),
            b: y.len(),
        });
    }
    TokenFeatureMatrix::<F>::check_alignment(word_alignment)?;
    let d = xlm.cfg.d;
    let width = feature_width(expert_count, d, include_dual);
    let pair = crate::corpus::ParallelPair {
        source: x.to_vec(),
        target: y.to_vec(),
        style_id: None,
    };
    let (states, dists) = xlm.target_states_and_distributions(&pair)?;
    let mut values = Vec::with_capacity(y.len() * width);
    for (i, &token) in y.iter().enumerate() {
        let emb = xlm.embedding_row(token);
        let f_model = model_feature(&states[i], emb)?;
        let f_mm = mismatch_features(&dists[i], token as usize).to_array();
        for _ in 0..expert_count {
            values.extend_from_slice(&f_model);
            if include_dual {
                // Replication rule: no dual model exists for the XLM
                // stream, so the model-derived block fills the position.
                values.extend_from_slice(&f_model);
            }
            values.extend_from_slice(&f_mm);
        }
    }
    Ok(TokenFeatureMatrix {
        matrix: FeatureMatrix::new(y.len(), width, values),
        word_alignment: word_alignment.to_vec(),
    })
}

/// Everything the estimator consumes for one QE sample.
#[derive(Debug, Clone)]
pub struct QeFeatures<F: Scalar> {
    pub nmt_tokens: TokenFeatureMatrix<F>,
    pub xlm_tokens: Option<TokenFeatureMatrix<F>>,
    pub nmt_words: FeatureMatrix<F>,
    pub xlm_words: Option<FeatureMatrix<F>>,
    pub nmt_gaps: FeatureMatrix<F>,
    pub xlm_gaps: Option<FeatureMatrix<F>>,
}

impl<F: Scalar> QeFeatures<F> {
    pub fn from_tokens(
        nmt_tokens: TokenFeatureMatrix<F>,
        xlm_tokens: Option<TokenFeatureMatrix<F>>,
    ) -> Result<Self, FeatureError> {
        if let Some(x) = &xlm_tokens {
            if x.width() != nmt_tokens.width() {
                return Err(FeatureError::WidthMismatch {
                    expected: nmt_tokens.width(),
                    got: x.width(),
                });
            }
        }
        let nmt_words = nmt_tokens.pool_to_words();
        let nmt_gaps = gap_features(&nmt_words)?;
        let (xlm_words, xlm_gaps) = match &xlm_tokens {
            Some(x) => {
                let w = x.pool_to_words();
                let g = gap_features(&w)?;
                (Some(w), Some(g))
            }
            None => (None, None),
        };
        Ok(Self {
            nmt_tokens,
            xlm_tokens,
            nmt_words,
            xlm_words,
            nmt_gaps,
            xlm_gaps,
        })
    }

    pub fn width(&self) -> usize {
        self.nmt_tokens.width()
    }

    pub fn word_count(&self) -> usize {
        self.nmt_words.rows
    }
}

/// Extract both feature streams for one (source, MT hypothesis) pair of
/// word sequences; the vocabulary handles subword segmentation and the
/// token→word alignment.
pub fn extract_features<F: Scalar>(
    predictor: &DualPredictor<F>,
    xlm: Option<&XlmModel<F>>,
    vocab: &Vocabulary,
    source: &[String],
    mt: &[String],
    include_dual: bool,
) -> Result<QeFeatures<F>, FeatureError> {
    let (x_ids, _) = vocab.encode_words(source);
    let (y_ids, alignment) = vocab.encode_words(mt);
    if x_ids.is_empty() || y_ids.is_empty() {
        return Err(FeatureError::Empty);
    }
    let nmt = assemble_nmt_features(predictor, &x_ids, &y_ids, &alignment, include_dual)?;
    let xlm_tokens = match xlm {
        Some(model) => Some(assemble_xlm_features(
            model,
            &x_ids,
            &y_ids,
            &alignment,
            predictor.cfg.expert_count,
            include_dual,
        )?),
        None => None,
    };
    QeFeatures::from_tokens(nmt, xlm_tokens)
}

// ── feature cache file ──────────────────────────────────────────────────
//
// Same manifest+binary layout idea as checkpoints: `manifest.json` plus
// `features.bin` (little-endian f32), one record per sentence holding the
// token-level matrices for both streams; word/gap matrices are re-derived
// on load.

#[derive(Debug, Serialize, Deserialize)]
struct FeatureFileManifest {
    format_version: u32,
    width: usize,
    has_xlm: bool,
    records: Vec<FeatureRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRecord {
    index: usize,
    rows: usize,
    word_alignment: Vec<usize>,
    /// Byte offset of the NMT block; the XLM block (when present) follows
    /// immediately after it.
    offset: usize,
}

pub fn save_feature_file<F: Scalar>(
    dir: &Path,
    samples: &[QeFeatures<F>],
) -> Result<(), FeatureError> {
    std::fs::create_dir_all(dir)?;
    let width = samples.first().map(|s| s.width()).unwrap_or(0);
    let has_xlm = samples.first().map(|s| s.xlm_tokens.is_some()).unwrap_or(false);
    let mut blob: Vec<u8> = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        if s.width() != width || s.xlm_tokens.is_some() != has_xlm {
            return Err(FeatureError::File(format!(
                "sample {index} layout differs from the first sample"
            )));
        }
        let offset = blob.len();
        for v in &s.nmt_tokens.matrix.values {
            blob.extend_from_slice(&v.to_f32().to_le_bytes());
        }
        if let Some(x) = &s.xlm_tokens {
            for v in &x.matrix.values {
                blob.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        records.push(FeatureRecord {
            index,
            rows: s.nmt_tokens.rows(),
            word_alignment: s.nmt_tokens.word_alignment.clone(),
            offset,
        });
    }
    let manifest = FeatureFileManifest {
        format_version: 1,
        width,
        has_xlm,
        records,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string(&manifest).map_err(|e| FeatureError::File(e.to_string()))?,
    )?;
    std::fs::write(dir.join("features.bin"), blob)?;
    Ok(())
}

pub fn load_feature_file(dir: &Path) -> Result<Vec<QeFeatures<f32>>, FeatureError> {
    let manifest: FeatureFileManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| FeatureError::File(e.to_string()))?;
    if manifest.format_version != 1 {
        return Err(FeatureError::File(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(dir.join("features.bin"))?;
    let read_block = |offset: usize, len: usize| -> Result<Vec<f32>, FeatureError> {
        let bytes = len * 4;
        if offset + bytes > blob.len() {
            return Err(FeatureError::File(format!(
                "record at offset {offset} overruns features.bin ({} bytes)",
                blob.len()
            )));
        }
        Ok((0..len)
            .map(|i| {
                let at = offset + i * 4;
                f32::from_le_bytes([blob[at], blob[at + 1], blob[at + 2], blob[at + 3]])
            })
            .collect())
    };
    let mut out = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let block = rec.rows * manifest.width;
        let nmt_values = read_block(rec.offset, block)?;
        let nmt = TokenFeatureMatrix {
            matrix: FeatureMatrix::new(rec.rows, manifest.width, nmt_values),
            word_alignment: rec.word_alignment.clone(),
        };
        let xlm = if manifest.has_xlm {
            let values = read_block(rec.offset + block * 4, block)?;
            Some(TokenFeatureMatrix {
                matrix: FeatureMatrix::new(rec.rows, manifest.width, values),
                word_alignment: rec.word_alignment.clone(),
            })
        } else {
            None
        };
        out.push(QeFeatures::from_tokens(nmt, xlm)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_parallel, make_qe_dataset, QeDataConfig};
    use crate::nmt::NmtConfig;
    use crate::xlm::XlmConfig;

    #[test]
    fn mismatch_examples() {
        let dist = [0.7, 0.2, 0.1];
        let a = mismatch_features::<f64>(&dist, 0);
        assert!((a.log_p_mt - 0.7f64.ln()).abs() < 1e-12);
        assert!((a.log_p_max - 0.7f64.ln()).abs() < 1e-12);
        assert_eq!(a.diff, 0.0);
        assert_eq!(a.exact_match, 1.0);

        let b = mismatch_features::<f64>(&dist, 2);
        assert!((b.log_p_mt - 0.1f64.ln()).abs() < 1e-12);
        assert!((b.log_p_max - 0.7f64.ln()).abs() < 1e-12);
        assert!((b.diff - (0.1f64.ln() - 0.7f64.ln())).abs() < 1e-12);
        assert_eq!(b.exact_match, 0.0);

        // Uniform over 4 tokens: lowest-index tie-break makes token 0 the
        // argmax.
        let u = mismatch_features::<f64>(&[0.25; 4], 0);
        assert!((u.log_p_mt - 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(u.diff, 0.0);
        assert_eq!(u.exact_match, 1.0);
    }

    #[test]
    fn mismatch_internal_consistency_on_model_distributions() {
        let vocab = Vocabulary::synthetic(16, 2);
        let model = DualPredictor::<f64>::init(
            NmtConfig {
                vocab_size: vocab.size(),
                d: 8,
                heads: 2,
                layers: 1,
                ff: 12,
                expert_count: 2,
                reserved_sos: 2,
                max_len: 24,
            },
            3,
        );
        let x: Vec<u32> = (0..5).map(|i| vocab.content_start() + i).collect();
        let y: Vec<u32> = (5..9).map(|i| vocab.content_start() + i).collect();
        let dists = model.token_distributions(&x, &y, 0).unwrap();
        for (i, dist) in dists.iter().enumerate() {
            let mm = mismatch_features(dist, y[i] as usize);
            assert!((mm.diff - (mm.log_p_mt - mm.log_p_max)).abs() < 1e-12);
            assert!(mm.diff <= 0.0);
            assert_eq!(mm.exact_match == 1.0, mm.diff == 0.0);
        }
    }

    #[test]
    fn model_feature_examples() {
        let f = model_feature::<f64>(&[1.0, -2.0, 3.0], &[0.5, 0.5, 2.0]).unwrap();
        assert_eq!(f, vec![0.5, -1.0, 6.0]);
        assert_eq!(
            model_feature::<f64>(&[0.0; 3], &[1.0, 2.0, 3.0]).unwrap(),
            vec![0.0; 3]
        );
        // Simultaneous sign flip leaves the product unchanged.
        let a = model_feature::<f64>(&[-1.0, 2.0], &[-0.5, -3.0]).unwrap();
        let b = model_feature::<f64>(&[1.0, -2.0], &[0.5, 3.0]).unwrap();
        assert_eq!(a, b);
        assert!(model_feature::<f64>(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn width_formula_reference_scale() {
        assert_eq!(feature_width(5, 512, true), 5140);
        assert_eq!(feature_width(3, 64, true), 3 * 132);
        assert_eq!(feature_width(1, 64, false), 68);
    }

    fn tiny_models(
        k: usize,
        d: usize,
    ) -> (Vocabulary, DualPredictor<f32>, XlmModel<f32>) {
        let vocab = Vocabulary::synthetic(14, k);
        let nmt = DualPredictor::init(
            NmtConfig {
                vocab_size: vocab.size(),
                d,
                heads: 2,
                layers: 1,
                ff: 12,
                expert_count: k,
                reserved_sos: k,
                max_len: 32,
            },
            1,
        );
        let xlm = XlmModel::init(
            XlmConfig {
                vocab_size: vocab.size(),
                d,
                heads: 2,
                layers: 1,
                ff: 12,
                expert_count: k,
                max_len: 40,
            },
            2,
        );
        (vocab, nmt, xlm)
    }

    #[test]
    fn streams_are_width_equal_across_configs() {
        for (k, d, dual) in [(1usize, 8usize, true), (2, 8, false), (3, 8, true)] {
            let (vocab, nmt, xlm) = tiny_models(k, d);
            let x: Vec<u32> = (0..4).map(|i| vocab.content_start() + i).collect();
            let y: Vec<u32> = (4..8).map(|i| vocab.content_start() + i).collect();
            let align: Vec<usize> = (0..y.len()).collect();
            let a = assemble_nmt_features(&nmt, &x, &y, &align, dual).unwrap();
            let b = assemble_xlm_features(&xlm, &x, &y, &align, k, dual).unwrap();
            assert_eq!(a.width(), feature_width(k, d, dual));
            assert_eq!(a.width(), b.width());
            assert_eq!(a.rows(), y.len());
            assert_eq!(b.rows(), y.len());
        }
    }

    #[test]
    fn nmt_mismatch_diff_nonpositive_everywhere() {
        let (vocab, nmt, _) = tiny_models(2, 8);
        let x: Vec<u32> = (0..5).map(|i| vocab.content_start() + i).collect();
        let y: Vec<u32> = (5..9).map(|i| vocab.content_start() + i).collect();
        let align: Vec<usize> = (0..y.len()).collect();
        let feats = assemble_nmt_features(&nmt, &x, &y, &align, true).unwrap();
        let slot = slot_width(8, true);
        for i in 0..feats.rows() {
            let row = feats.matrix.row(i);
            for z in 0..2 {
                let diff = row[z * slot + slot - 2];
                assert!(diff <= 0.0, "row {i} slot {z} diff {diff}");
            }
        }
    }

    #[test]
    fn dual_block_is_source_independent_and_nondegenerate() {
        let (vocab, nmt, _) = tiny_models(2, 8);
        let y: Vec<u32> = (5..9).map(|i| vocab.content_start() + i).collect();
        let align: Vec<usize> = (0..y.len()).collect();
        let x1: Vec<u32> = (0..4).map(|i| vocab.content_start() + i).collect();
        let x2: Vec<u32> = (1..5).map(|i| vocab.content_start() + i).collect();
        let f1 = assemble_nmt_features(&nmt, &x1, &y, &align, true).unwrap();
        let f2 = assemble_nmt_features(&nmt, &x2, &y, &align, true).unwrap();
        let mut dual_equal = true;
        let mut model_equal = true;
        let mut dual_vs_model_gap = 0.0f32;
        for i in 0..f1.rows() {
            let (r1, r2) = (f1.matrix.row(i), f2.matrix.row(i));
            // Dual block of slot 0 occupies [d, 2d).
            if r1[8..16] != r2[8..16] {
                dual_equal = false;
            }
            if r1[..8] != r2[..8] {
                model_equal = false;
            }
            for j in 0..8 {
                dual_vs_model_gap += (r1[j] - r1[8 + j]).abs();
            }
        }
        assert!(dual_equal, "f_dual must not depend on the source");
        assert!(!model_equal, "f_model must depend on the source");
        assert!(dual_vs_model_gap > 0.0, "f_dual degenerates to f_model");
    }

    #[test]
    fn xlm_dual_block_is_replicated_and_slots_tiled() {
        let (vocab, _, xlm) = tiny_models(3, 8);
        let x: Vec<u32> = (0..4).map(|i| vocab.content_start() + i).collect();
        let y: Vec<u32> = (4..7).map(|i| vocab.content_start() + i).collect();
        let align: Vec<usize> = (0..y.len()).collect();
        let f = assemble_xlm_features(&xlm, &x, &y, &align, 3, true).unwrap();
        let slot = slot_width(8, true);
        for i in 0..f.rows() {
            let row = f.matrix.row(i);
            // Within a slot the dual block equals the model block …
            assert_eq!(row[..8], row[8..16]);
            // … and all three slots are identical copies.
            assert_eq!(row[..slot], row[slot..2 * slot]);
            assert_eq!(row[..slot], row[2 * slot..3 * slot]);
        }
    }

    #[test]
    fn gap_feature_examples() {
        let words = FeatureMatrix::new(2, 1, vec![1.0f64, 3.0]);
        let gaps = gap_features(&words).unwrap();
        assert_eq!(gaps.rows, 3);
        assert_eq!(gaps.values, vec![1.0, 2.0, 3.0]);

        let single = FeatureMatrix::new(1, 2, vec![4.0f64, 5.0]);
        let g = gap_features(&single).unwrap();
        assert_eq!(g.rows, 2);
        assert_eq!(g.row(0), g.row(1));

        let empty = FeatureMatrix::<f64>::new(0, 3, vec![]);
        assert!(gap_features(&empty).is_err());
    }

    #[test]
    fn pooling_respects_alignment() {
        let tokens = TokenFeatureMatrix {
            matrix: FeatureMatrix::new(3, 2, vec![1.0f64, 0.0, 3.0, 0.0, 5.0, 2.0]),
            word_alignment: vec![0, 0, 1],
        };
        let words = tokens.pool_to_words();
        assert_eq!(words.rows, 2);
        assert_eq!(words.row(0), &[2.0, 0.0]);
        assert_eq!(words.row(1), &[5.0, 2.0]);
    }

    #[test]
    fn assembly_is_deterministic() {
        let (vocab, nmt, xlm) = tiny_models(2, 8);
        let sample = {
            let pairs = gen_parallel(3, 4, &vocab, 2).unwrap();
            let ds = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 3).unwrap();
            ds.train[0].clone()
        };
        let a =
            extract_features(&nmt, Some(&xlm), &vocab, &sample.source, &sample.mt, true).unwrap();
        let b =
            extract_features(&nmt, Some(&xlm), &vocab, &sample.source, &sample.mt, true).unwrap();
        assert_eq!(a.nmt_tokens, b.nmt_tokens);
        assert_eq!(a.xlm_tokens, b.xlm_tokens);
    }

    #[test]
    fn feature_file_round_trip() {
        let (vocab, nmt, xlm) = tiny_models(2, 8);
        let pairs = gen_parallel(3, 6, &vocab, 2).unwrap();
        let ds = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 3).unwrap();
        let feats: Vec<QeFeatures<f32>> = ds
            .train
            .iter()
            .chain(&ds.dev)
            .chain(&ds.test)
            .map(|s| extract_features(&nmt, Some(&xlm), &vocab, &s.source, &s.mt, true).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_feature_file(dir.path(), &feats).unwrap();
        let loaded = load_feature_file(dir.path()).unwrap();
        assert_eq!(loaded.len(), feats.len());
        for (a, b) in feats.iter().zip(&loaded) {
            assert_eq!(a.nmt_tokens, b.nmt_tokens);
            assert_eq!(a.xlm_tokens, b.xlm_tokens);
            assert_eq!(a.nmt_gaps, b.nmt_gaps);
        }
    }
}
