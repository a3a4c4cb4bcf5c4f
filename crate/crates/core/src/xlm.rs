//! Toy cross-lingual masked language model.
//!
//! A transformer encoder (unified blocks permanently in encode mode) with
//! token, positional and language embeddings, pretrained on masked language
//! modeling over monolingual halves and translation language modeling over
//! concatenated pairs. The TLM layout is `[src, EOS, tgt, EOS]` with
//! positions restarting at the target segment; predicting a masked target
//! token can attend across to the source span.

use crate::checkpoint::{self, CheckpointError, LoadedCheckpoint};
use crate::corpus::{ParallelPair, Vocabulary, EOS, MASK};
use crate::nmt::{output_logit_mask, UnifiedBlock};
use crate::nn::{
    accumulate_grads, sinusoidal_positions, Adam, Graph, NodeId, OptimError, Parameter, Scalar,
    Tensor,
};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_KIND: &str = "xlm";

#[derive(Debug, Error)]
pub enum XlmError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds the model's max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("select rate {0} outside [0,1]")]
    SelectRate(f64),
    #[error(transparent)]
    Layer(#[from] crate::nn::LayerError),
    #[error(transparent)]
    Nmt(#[from] crate::nmt::NmtError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct XlmConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    /// Expert SOS tokens present in the shared vocabulary (masked out of
    /// the prediction head's support).
    pub expert_count: usize,
    pub max_len: usize,
}

/// Which language embedding a token carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lang {
    Src,
    Tgt,
}

/// A masking-objective input: the altered tokens plus everything needed to
/// reconstruct and score the prediction positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input: Vec<u32>,
    /// Positional index per token (restarts at the target segment in TLM).
    pub positions: Vec<usize>,
    pub langs: Vec<Lang>,
    /// Indices into `input` that are prediction targets.
    pub predict_positions: Vec<usize>,
    /// Original tokens at the prediction positions, in the same order.
    pub labels: Vec<u32>,
}

impl MaskedBatch {
    pub fn validate(&self) {
        assert_eq!(self.input.len(), self.positions.len());
        assert_eq!(self.input.len(), self.langs.len());
        assert_eq!(self.predict_positions.len(), self.labels.len());
    }
}

/// Replacement mix for selected tokens; the remainder stays unchanged.
#[derive(Debug, Clone, Copy)]
pub struct MaskPolicy {
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

impl MaskPolicy {
    /// Every selected token becomes MASK (the 80/10/10 split disabled).
    pub fn always_mask() -> Self {
        Self {
            mask_prob: 1.0,
            random_prob: 0.0,
        }
    }
}

fn random_content_token(rng: &mut SeededRng, vocab: &Vocabulary) -> u32 {
    vocab.content_start() + rng.usize_below(vocab.content_size()) as u32
}

fn apply_masking(
    tokens: &mut [u32],
    eligible: &[usize],
    select_rate: f64,
    policy: MaskPolicy,
    rng: &mut SeededRng,
    vocab: &Vocabulary,
) -> (Vec<usize>, Vec<u32>) {
    let mut predict_positions = Vec::new();
    let mut labels = Vec::new();
    for &i in eligible {
        if !rng.chance(select_rate) {
            continue;
        }
        predict_positions.push(i);
        labels.push(tokens[i]);
        let r = rng.f64();
        if r < policy.mask_prob {
            tokens[i] = MASK;
        } else if r < policy.mask_prob + policy.random_prob {
            tokens[i] = random_content_token(rng, vocab);
        }
        // Otherwise the token stays unchanged but is still predicted.
    }
    (predict_positions, labels)
}

/// Monolingual masking: each token is independently selected with
/// `select_rate`; selected tokens are masked, randomized or kept per the
/// policy, and every selected position becomes a prediction target.
pub fn mlm_mask(
    seq: &[u32],
    lang: Lang,
    select_rate: f64,
    policy: MaskPolicy,
    rng: &mut SeededRng,
    vocab: &Vocabulary,
) -> Result<MaskedBatch, XlmError> {
    if !(0.0..=1.0).contains(&select_rate) {
        return Err(XlmError::SelectRate(select_rate));
    }
    if seq.is_empty() {
        return Err(XlmError::EmptySequence);
    }
    let mut input = seq.to_vec();
    let eligible: Vec<usize> = (0..seq.len()).collect();
    let (predict_positions, labels) =
        apply_masking(&mut input, &eligible, select_rate, policy, rng, vocab);
    let n = input.len();
    Ok(MaskedBatch {
        input,
        positions: (0..n).collect(),
        langs: vec![lang; n],
        predict_positions,
        labels,
    })
}

/// Translation-pair masking over the concatenated layout
/// `[src, EOS, tgt, EOS]`. Words in both spans are eligible; the EOS
/// separators are layout, not content, and are never selected. Positions
/// restart at 0 for the target segment and the language id switches exactly
/// once, after the first EOS.
pub fn tlm_batch(
    pair: &ParallelPair,
    select_rate: f64,
    policy: MaskPolicy,
    rng: &mut SeededRng,
    vocab: &Vocabulary,
) -> Result<MaskedBatch, XlmError> {
    if !(0.0..=1.0).contains(&select_rate) {
        return Err(XlmError::SelectRate(select_rate));
    }
    if pair.source.is_empty() || pair.target.is_empty() {
        return Err(XlmError::EmptySequence);
    }
    let (mut input, positions, langs) = tlm_layout(pair);
    let src_len = pair.source.len();
    let eligible: Vec<usize> = (0..src_len)
        .chain(src_len + 1..src_len + 1 + pair.target.len())
        .collect();
    let (predict_positions, labels) =
        apply_masking(&mut input, &eligible, select_rate, policy, rng, vocab);
    Ok(MaskedBatch {
        input,
        positions,
        langs,
        predict_positions,
        labels,
    })
}

/// The unmasked TLM layout of a pair.
pub fn tlm_layout(pair: &ParallelPair) -> (Vec<u32>, Vec<usize>, Vec<Lang>) {
    let total = pair.source.len() + pair.target.len() + 2;
    let mut input = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut langs = Vec::with_capacity(total);
    for (i, &t) in pair.source.iter().enumerate() {
        input.push(t);
        positions.push(i);
        langs.push(Lang::Src);
    }
    input.push(EOS);
    positions.push(pair.source.len());
    langs.push(Lang::Src);
    for (i, &t) in pair.target.iter().enumerate() {
        input.push(t);
        positions.push(i);
        langs.push(Lang::Tgt);
    }
    input.push(EOS);
    positions.push(pair.target.len());
    langs.push(Lang::Tgt);
    (input, positions, langs)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainReport {
    /// Mean cross-entropy per prediction position, absent when every batch
    /// was skipped.
    pub loss: Option<f64>,
    /// Batches skipped for having no prediction positions.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct XlmModel<F: Scalar> {
    pub cfg: XlmConfig,
    pub embedding: Parameter<F>,
    /// Two rows: source-language and target-language embeddings.
    pub lang_embedding: Parameter<F>,
    pub blocks: Vec<UnifiedBlock<F>>,
    positions: Tensor<F>,
    logit_mask: Tensor<F>,
}

impl<F: Scalar> XlmModel<F> {
    pub fn init(cfg: XlmConfig, seed: u64) -> Self {
        assert!(cfg.heads > 0 && cfg.d % cfg.heads == 0);
        let mut rng = SeededRng::derive(seed, "xlm-init");
        let scale = (6.0 / (cfg.vocab_size + cfg.d) as f64).sqrt();
        let embedding = Parameter::new(
            "xlm.embedding",
            Tensor::uniform(vec![cfg.vocab_size, cfg.d], scale, &mut rng),
        );
        let lang_embedding = Parameter::new(
            "xlm.lang_embedding",
            Tensor::uniform(vec![2, cfg.d], 0.1, &mut rng),
        );
        let blocks = (0..cfg.layers)
            .map(|i| UnifiedBlock::init(&format!("xlm.b{i}"), cfg.d, cfg.heads, cfg.ff, &mut rng))
            .collect();
        let positions = sinusoidal_positions(cfg.max_len, cfg.d);
        let logit_mask = output_logit_mask(cfg.vocab_size, cfg.expert_count);
        Self {
            cfg,
            embedding,
            lang_embedding,
            blocks,
            positions,
            logit_mask,
        }
    }

    fn check_len(&self, len: usize) -> Result<(), XlmError> {
        if len == 0 {
            return Err(XlmError::EmptySequence);
        }
        if len > self.cfg.max_len {
            return Err(XlmError::TooLong {
                len,
                max: self.cfg.max_len,
            });
        }
        Ok(())
    }

    /// Encoder states for an input with explicit positions and languages.
    fn states(
        &self,
        g: &mut Graph<F>,
        input: &[u32],
        positions: &[usize],
        langs: &[Lang],
    ) -> Result<NodeId, XlmError> {
        self.check_len(input.len())?;
        assert_eq!(input.len(), positions.len());
        assert_eq!(input.len(), langs.len());
        let table = g.param(&self.embedding);
        let emb = g.embed(table, input);
        let emb = g.scale(emb, (self.cfg.d as f64).sqrt());
        let d = self.cfg.d;
        let mut pos_values = Vec::with_capacity(input.len() * d);
        for &p in positions {
            assert!(p < self.cfg.max_len, "position {p} out of table");
            pos_values.extend_from_slice(&self.positions.values[p * d..(p + 1) * d]);
        }
        let pos = g.constant(vec![input.len(), d], pos_values);
        let lang_table = g.param(&self.lang_embedding);
        let lang_ids: Vec<u32> = langs
            .iter()
            .map(|l| match l {
                Lang::Src => 0u32,
                Lang::Tgt => 1u32,
            })
            .collect();
        let lang = g.embed(lang_table, &lang_ids);
        let te = g.add(emb, pos);
        let mut states = g.add(te, lang);
        for block in &self.blocks {
            states = block.forward(g, states, crate::nmt::BlockMode::Encode, None)?;
        }
        Ok(states)
    }

    /// MLM-head logits for every position (tied to the embedding table,
    /// specials masked out of the support).
    fn logits(&self, g: &mut Graph<F>, states: NodeId) -> NodeId {
        let table = g.param(&self.embedding);
        let table_t = g.transpose(table);
        let raw = g.matmul(states, table_t);
        let mask = g.leaf(&self.logit_mask);
        g.add_row(raw, mask)
    }

    /// Mean cross-entropy over the batch's prediction positions.
    fn batch_loss_node(&self, g: &mut Graph<F>, batch: &MaskedBatch) -> Result<NodeId, XlmError> {
        batch.validate();
        let states = self.states(g, &batch.input, &batch.positions, &batch.langs)?;
        let logits = self.logits(g, states);
        let lsm = g.log_softmax(logits);
        let n = batch.input.len();
        let mut weights = vec![F::zero(); n];
        let mut labels_full = vec![0usize; n];
        for (&pos, &label) in batch.predict_positions.iter().zip(&batch.labels) {
            weights[pos] = F::one();
            labels_full[pos] = label as usize;
        }
        let picked = g.pick_per_row(lsm, &labels_full);
        let w = g.constant(vec![n], weights);
        let weighted = g.mul(picked, w);
        let total = g.sum(weighted);
        Ok(g.scale(total, -1.0 / batch.predict_positions.len() as f64))
    }

    /// One optimizer step over a set of masked batches. Batches with no
    /// prediction positions are skipped and counted.
    pub fn pretrain_step(
        &mut self,
        batches: &[MaskedBatch],
        adam: &Adam,
    ) -> Result<PretrainReport, XlmError> {
        let usable: Vec<&MaskedBatch> = batches
            .iter()
            .filter(|b| !b.predict_positions.is_empty())
            .collect();
        let skipped = batches.len() - usable.len();
        if usable.is_empty() {
            return Ok(PretrainReport {
                loss: None,
                skipped,
            });
        }
        let inv = F::from_f64(1.0 / usable.len() as f64);
        let mut total = 0.0;
        for batch in &usable {
            let mut g = Graph::new();
            let loss = self.batch_loss_node(&mut g, batch)?;
            total += g.scalar_value(loss).to_f64();
            g.backward(loss, inv);
            accumulate_grads(&g, self.params_mut());
        }
        adam.step(self.params_mut())?;
        Ok(PretrainReport {
            loss: Some(total / usable.len() as f64),
            skipped,
        })
    }

    /// Forward loss without an update (for held-out evaluation).
    pub fn batch_loss(&self, batch: &MaskedBatch) -> Result<Option<f64>, XlmError> {
        if batch.predict_positions.is_empty() {
            return Ok(None);
        }
        let mut g = Graph::new();
        let loss = self.batch_loss_node(&mut g, batch)?;
        Ok(Some(g.scalar_value(loss).to_f64()))
    }

    /// Masked-token prediction accuracy over batches.
    pub fn masked_accuracy(&self, batches: &[MaskedBatch]) -> Result<f64, XlmError> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for batch in batches {
            if batch.predict_positions.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let states = self.states(&mut g, &batch.input, &batch.positions, &batch.langs)?;
            let logits = self.logits(&mut g, states);
            let v = self.cfg.vocab_size;
            for (&pos, &label) in batch.predict_positions.iter().zip(&batch.labels) {
                let row = &g.values(logits)[pos * v..(pos + 1) * v];
                let mut best = 0usize;
                for (j, val) in row.iter().enumerate() {
                    if *val > row[best] {
                        best = j;
                    }
                }
                total += 1;
                if best as u32 == label {
                    hit += 1;
                }
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// Hidden states over the target span from one unmasked pass, plus
    /// per-position pseudo-likelihood distributions: position i's
    /// distribution comes from an extra pass with exactly that position
    /// masked, so a token never conditions on its own identity.
    #[allow(clippy::type_complexity)]
    pub fn target_states_and_distributions(
        &self,
        pair: &ParallelPair,
    ) -> Result<(Vec<Vec<F>>, Vec<Vec<F>>), XlmError> {
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(XlmError::EmptySequence);
        }
        let (input, positions, langs) = tlm_layout(pair);
        let src_len = pair.source.len();
        let tgt_len = pair.target.len();
        let d = self.cfg.d;
        let v = self.cfg.vocab_size;

        let mut g = Graph::new();
        let states = self.states(&mut g, &input, &positions, &langs)?;
        let state_rows: Vec<Vec<F>> = (0..tgt_len)
            .map(|i| {
                let row = src_len + 1 + i;
                g.values(states)[row * d..(row + 1) * d].to_vec()
            })
            .collect();

        let mut dist_rows = Vec::with_capacity(tgt_len);
        for i in 0..tgt_len {
            let row = src_len + 1 + i;
            let mut masked = input.clone();
            masked[row] = MASK;
            let mut g2 = Graph::new();
            let st = self.states(&mut g2, &masked, &positions, &langs)?;
            let logits = self.logits(&mut g2, st);
            let probs = g2.softmax(logits, 1);
            dist_rows.push(g2.values(probs)[row * v..(row + 1) * v].to_vec());
        }
        Ok((state_rows, dist_rows))
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = vec![&self.embedding, &self.lang_embedding];
        out.extend(self.blocks.iter().flat_map(|b| b.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = vec![&mut self.embedding, &mut self.lang_embedding];
        out.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        out
    }

    pub fn embedding_row(&self, token: u32) -> &[F] {
        let d = self.cfg.d;
        &self.embedding.tensor.values[token as usize * d..(token as usize + 1) * d]
    }

    pub fn save(&self, dir: &std::path::Path, vocab_fp: u64) -> Result<(), CheckpointError> {
        checkpoint::save_checkpoint(dir, CHECKPOINT_KIND, vocab_fp, &self.cfg, &self.params())
    }
}

impl XlmModel<f32> {
    pub fn load_from(loaded: &LoadedCheckpoint) -> Result<Self, CheckpointError> {
        loaded.expect_kind(CHECKPOINT_KIND)?;
        let cfg: XlmConfig = loaded.hyper()?;
        let mut model = Self::init(cfg, 0);
        loaded.assign(model.params_mut())?;
        Ok(model)
    }

    pub fn load(dir: &std::path::Path, vocab_fp: u64) -> Result<Self, CheckpointError> {
        let loaded = checkpoint::load_checkpoint(dir)?;
        loaded.expect_vocab(vocab_fp)?;
        Self::load_from(&loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_parallel;

    fn setup() -> (Vocabulary, XlmModel<f64>) {
        let vocab = Vocabulary::synthetic(24, 2);
        let cfg = XlmConfig {
            vocab_size: vocab.size(),
            d: 16,
            heads: 2,
            layers: 2,
            ff: 24,
            expert_count: 2,
            max_len: 40,
        };
        (vocab.clone(), XlmModel::init(cfg, 5))
    }

    fn content(vocab: &Vocabulary, offsets: &[u32]) -> Vec<u32> {
        offsets.iter().map(|o| vocab.content_start() + o).collect()
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let (vocab, _) = setup();
        let seq = content(&vocab, &[0, 1, 2, 3, 4]);
        let mut rng = SeededRng::new(1);
        let b = mlm_mask(&seq, Lang::Src, 0.0, MaskPolicy::default(), &mut rng, &vocab).unwrap();
        assert_eq!(b.input, seq);
        assert!(b.predict_positions.is_empty());
    }

    #[test]
    fn forced_mask_rate_one_masks_everything() {
        let (vocab, _) = setup();
        let seq = content(&vocab, &[0, 1, 2, 3, 4, 5]);
        let mut rng = SeededRng::new(2);
        let b = mlm_mask(&seq, Lang::Tgt, 1.0, MaskPolicy::always_mask(), &mut rng, &vocab)
            .unwrap();
        assert!(b.input.iter().all(|&t| t == MASK));
        assert_eq!(b.predict_positions.len(), seq.len());
        assert_eq!(b.labels, seq);
    }

    #[test]
    fn masking_never_touches_unselected_positions() {
        let (vocab, _) = setup();
        let seq = content(&vocab, &[3, 1, 4, 1, 5, 9, 2, 6]);
        let mut rng = SeededRng::new(3);
        let b = mlm_mask(&seq, Lang::Src, 0.4, MaskPolicy::default(), &mut rng, &vocab).unwrap();
        for (i, (&orig, &now)) in seq.iter().zip(&b.input).enumerate() {
            if !b.predict_positions.contains(&i) {
                assert_eq!(orig, now, "unselected position {i} changed");
            }
        }
    }

    #[test]
    fn selection_rate_concentrates() {
        let (vocab, _) = setup();
        let mut rng = SeededRng::new(4);
        let mut selected = 0usize;
        let mut total = 0usize;
        for s in 0..200 {
            let seq: Vec<u32> = (0..50)
                .map(|i| vocab.content_start() + ((i + s) % vocab.content_size()) as u32)
                .collect();
            let b =
                mlm_mask(&seq, Lang::Src, 0.15, MaskPolicy::default(), &mut rng, &vocab).unwrap();
            selected += b.predict_positions.len();
            total += seq.len();
        }
        let rate = selected as f64 / total as f64;
        assert!((0.13..=0.17).contains(&rate), "selection rate {rate}");
    }

    #[test]
    fn tlm_layout_contract() {
        let (vocab, _) = setup();
        let pair = ParallelPair {
            source: content(&vocab, &[0, 1, 2]),
            target: content(&vocab, &[5, 6, 7, 8]),
            style_id: None,
        };
        let mut rng = SeededRng::new(5);
        let b = tlm_batch(&pair, 0.3, MaskPolicy::default(), &mut rng, &vocab).unwrap();
        assert_eq!(b.input.len(), 3 + 4 + 2);
        // Language switches exactly once, right after the first EOS.
        let switch_points = b.langs.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(switch_points, 1);
        assert_eq!(b.langs[3], Lang::Src, "first EOS belongs to the source span");
        assert_eq!(b.langs[4], Lang::Tgt);
        // Positions restart for the target segment.
        assert_eq!(b.positions[4], 0);
        // The two EOS separators are never prediction targets.
        assert!(!b.predict_positions.contains(&3));
        assert!(!b.predict_positions.contains(&(b.input.len() - 1)));
    }

    #[test]
    fn fresh_model_loss_near_log_support() {
        let (vocab, mut model) = setup();
        let pairs = gen_parallel(6, 8, &vocab, 1).unwrap();
        let mut rng = SeededRng::new(6);
        let batches: Vec<MaskedBatch> = pairs
            .iter()
            .map(|p| tlm_batch(p, 0.3, MaskPolicy::default(), &mut rng, &vocab).unwrap())
            .collect();
        let adam = Adam::with_lr(1e-3);
        let report = model.pretrain_step(&batches, &adam).unwrap();
        let loss = report.loss.unwrap();
        let support =
            crate::nmt::output_support_size(model.cfg.vocab_size, model.cfg.expert_count);
        let expected = (support as f64).ln();
        assert!(
            (loss - expected).abs() / expected < 0.2,
            "fresh loss {loss} should be within 20% of ln(support) {expected}"
        );
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn zero_prediction_batches_are_skipped() {
        let (vocab, mut model) = setup();
        let seq = content(&vocab, &[0, 1, 2, 3]);
        let mut rng = SeededRng::new(7);
        let empty =
            mlm_mask(&seq, Lang::Src, 0.0, MaskPolicy::default(), &mut rng, &vocab).unwrap();
        let adam = Adam::with_lr(1e-3);
        let report = model.pretrain_step(&[empty], &adam).unwrap();
        assert_eq!(report.skipped, 1);
        assert!(report.loss.is_none());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let run = || {
            let (vocab, mut model) = setup();
            let pairs = gen_parallel(8, 6, &vocab, 1).unwrap();
            let mut rng = SeededRng::new(9);
            let adam = Adam::with_lr(1e-3);
            let mut losses = Vec::new();
            for _ in 0..4 {
                let batches: Vec<MaskedBatch> = pairs
                    .iter()
                    .map(|p| tlm_batch(p, 0.3, MaskPolicy::default(), &mut rng, &vocab).unwrap())
                    .collect();
                losses.push(
                    model
                        .pretrain_step(&batches, &adam)
                        .unwrap()
                        .loss
                        .unwrap()
                        .to_bits(),
                );
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn target_states_and_distributions_contract() {
        let (vocab, model) = setup();
        let pair = ParallelPair {
            source: content(&vocab, &[0, 1, 2, 3, 4]),
            target: content(&vocab, &[5, 6, 7]),
            style_id: None,
        };
        let (states, dists) = model.target_states_and_distributions(&pair).unwrap();
        assert_eq!(states.len(), 3);
        assert_eq!(dists.len(), 3);
        for row in &dists {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_target_prediction_attends_to_source() {
        // Replacing the source span changes the distribution at a masked
        // target position: cross-lingual attention is live.
        let (vocab, model) = setup();
        let pair = ParallelPair {
            source: content(&vocab, &[0, 1, 2, 3]),
            target: content(&vocab, &[5, 6, 7]),
            style_id: None,
        };
        let mut other = pair.clone();
        other.source = content(&vocab, &[10, 11, 12, 13]);
        let (_, d1) = model.target_states_and_distributions(&pair).unwrap();
        let (_, d2) = model.target_states_and_distributions(&other).unwrap();
        assert_ne!(d1[1], d2[1], "source span is invisible to target predictions");
    }

    #[test]
    fn feature_pass_is_pure() {
        let (vocab, model) = setup();
        let pair = ParallelPair {
            source: content(&vocab, &[0, 1, 2]),
            target: content(&vocab, &[5, 6, 7, 8]),
            style_id: None,
        };
        let (s1, d1) = model.target_states_and_distributions(&pair).unwrap();
        let (s2, d2) = model.target_states_and_distributions(&pair).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (vocab, model) = setup();
        let model32: XlmModel<f32> = XlmModel::init(model.cfg, 5);
        let dir = tempfile::tempdir().unwrap();
        model32.save(dir.path(), vocab.fingerprint()).unwrap();
        let loaded = XlmModel::<f32>::load(dir.path(), vocab.fingerprint()).unwrap();
        for (a, b) in model32.params().iter().zip(loaded.params()) {
            assert_eq!(a.tensor.values, b.tensor.values);
        }
    }
}
