//! The dual NMT predictor: embedding, two conditional encoders, mixture
//! training, greedy decoding and teacher-forced distributions.

use super::{BlockMode, NmtError, UnifiedBlock};
use crate::checkpoint::{self, CheckpointError, LoadedCheckpoint};
use crate::corpus::{ParallelPair, EOS, FIRST_SOS, PAD};
use crate::nn::{
    accumulate_grads, causal_mask, key_padding_mask, sinusoidal_positions, Adam, Graph, NodeId,
    Parameter, Scalar, Tensor,
};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_KIND: &str = "dual-nmt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NmtConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    /// Active mixture experts.
    pub expert_count: usize,
    /// SOS tokens reserved in the vocabulary (>= expert_count); all of them
    /// are masked out of the output support even when fewer are active.
    pub reserved_sos: usize,
    pub max_len: usize,
}

/// Which conditional encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// Primal runs EncA as encoder and EncB as decoder; Dual swaps the roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Primal,
    Dual,
}

impl Direction {
    fn sides(self) -> (Side, Side) {
        match self {
            Direction::Primal => (Side::A, Side::B),
            Direction::Dual => (Side::B, Side::A),
        }
    }
}

/// A stack of unified blocks; mode is a per-call argument, so the same
/// parameters serve encoding and decoding.
#[derive(Debug, Clone)]
pub struct ConditionalEncoder<F: Scalar> {
    pub blocks: Vec<UnifiedBlock<F>>,
}

impl<F: Scalar> ConditionalEncoder<F> {
    fn init(name: &str, cfg: &NmtConfig, rng: &mut SeededRng) -> Self {
        Self {
            blocks: (0..cfg.layers)
                .map(|i| UnifiedBlock::init(&format!("{name}.b{i}"), cfg.d, cfg.heads, cfg.ff, rng))
                .collect(),
        }
    }

    fn run_encode(
        &self,
        g: &mut Graph<F>,
        mut states: NodeId,
        self_mask: Option<&Tensor<F>>,
    ) -> Result<NodeId, NmtError> {
        for block in &self.blocks {
            states = block.forward(g, states, BlockMode::Encode, self_mask)?;
        }
        Ok(states)
    }

    fn run_decode(
        &self,
        g: &mut Graph<F>,
        mut states: NodeId,
        context: NodeId,
        self_mask: Option<&Tensor<F>>,
        cross_mask: Option<&Tensor<F>>,
    ) -> Result<NodeId, NmtError> {
        for block in &self.blocks {
            states = block.forward(
                g,
                states,
                BlockMode::Decode {
                    context,
                    cross_mask,
                },
                self_mask,
            )?;
        }
        Ok(states)
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

/// Mixture evaluation of one sample in one graph: per-expert loss nodes,
/// their values, and the winning expert (lowest NLL, ties to the lowest
/// index).
pub struct MixtureNodes {
    pub losses: Vec<NodeId>,
    pub nlls: Vec<f64>,
    pub winner: usize,
}

/// Hard responsibility assignment: one-hot at the NLL argmin, ties broken
/// toward the lowest expert index.
pub fn responsibility(nlls: &[f64]) -> Vec<f64> {
    assert!(!nlls.is_empty(), "responsibility of zero experts");
    let mut winner = 0;
    for (i, v) in nlls.iter().enumerate() {
        if *v < nlls[winner] {
            winner = i;
        }
    }
    let mut r = vec![0.0; nlls.len()];
    r[winner] = 1.0;
    r
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub primal_loss: f64,
    pub dual_loss: Option<f64>,
}

/// Additive logit mask hiding tokens a decoder never generates: PAD, MASK,
/// the language markers and every expert SOS token. EOS and UNK stay
/// predictable. Keeping these out of the output support also keeps the tied
/// projection from leaking gradient into losing experts' SOS embeddings:
/// the hard-EM property that only the winning expert's start token moves
/// holds exactly.
pub fn output_logit_mask<F: Scalar>(vocab_size: usize, expert_count: usize) -> Tensor<F> {
    use crate::corpus::{LANG_SRC, LANG_TGT, MASK};
    let mut row = vec![F::zero(); vocab_size];
    let mut hide = vec![PAD, MASK, LANG_SRC, LANG_TGT];
    hide.extend((0..expert_count as u32).map(|z| FIRST_SOS + z));
    for id in hide {
        row[id as usize] = F::from_f64(crate::nn::MASKED_LOGIT);
    }
    Tensor::from_vec(vec![vocab_size], row)
}

/// Number of tokens the output distribution ranges over.
pub fn output_support_size(vocab_size: usize, expert_count: usize) -> usize {
    vocab_size - 4 - expert_count
}

#[derive(Debug, Clone)]
pub struct DualPredictor<F: Scalar> {
    pub cfg: NmtConfig,
    /// One table serves source encoding, target decoding, target encoding
    /// and (transposed) the output projection.
    pub embedding: Parameter<F>,
    pub enc_a: ConditionalEncoder<F>,
    pub enc_b: ConditionalEncoder<F>,
    positions: Tensor<F>,
    logit_mask: Tensor<F>,
}

impl<F: Scalar> DualPredictor<F> {
    pub fn init(cfg: NmtConfig, seed: u64) -> Self {
        assert!(
            cfg.heads > 0 && cfg.d % cfg.heads == 0,
            "d must be divisible by heads"
        );
        assert!(cfg.expert_count >= 1);
        let mut rng = SeededRng::derive(seed, "nmt-init");
        let scale = (6.0 / (cfg.vocab_size + cfg.d) as f64).sqrt();
        let embedding = Parameter::new(
            "embedding",
            Tensor::uniform(vec![cfg.vocab_size, cfg.d], scale, &mut rng),
        );
        let enc_a = ConditionalEncoder::init("enc_a", &cfg, &mut rng);
        let enc_b = ConditionalEncoder::init("enc_b", &cfg, &mut rng);
        assert!(cfg.reserved_sos >= cfg.expert_count);
        let positions = sinusoidal_positions(cfg.max_len, cfg.d);
        let logit_mask = output_logit_mask(cfg.vocab_size, cfg.reserved_sos);
        Self {
            cfg,
            embedding,
            enc_a,
            enc_b,
            positions,
            logit_mask,
        }
    }

    pub fn output_support(&self) -> usize {
        output_support_size(self.cfg.vocab_size, self.cfg.reserved_sos)
    }

    /// All weights zero; logits are then exactly uniform. Test scaffolding.
    pub fn init_zeroed(cfg: NmtConfig) -> Self {
        let mut model = Self::init(cfg, 0);
        for p in model.params_mut() {
            p.tensor.values.iter_mut().for_each(|v| *v = F::zero());
        }
        model
    }

    fn side(&self, side: Side) -> &ConditionalEncoder<F> {
        match side {
            Side::A => &self.enc_a,
            Side::B => &self.enc_b,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), NmtError> {
        if tokens.is_empty() {
            return Err(NmtError::EmptySequence);
        }
        if tokens.len() > self.cfg.max_len {
            return Err(NmtError::TooLong {
                len: tokens.len(),
                max: self.cfg.max_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(NmtError::TokenRange {
                    id: t,
                    size: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed_with_positions(&self, g: &mut Graph<F>, tokens: &[u32]) -> NodeId {
        let table = g.param(&self.embedding);
        let emb = g.embed(table, tokens);
        // √d scaling keeps token identity from drowning in the unit-scale
        // position signal.
        let scaled = g.scale(emb, (self.cfg.d as f64).sqrt());
        let pos_table = g.leaf(&self.positions);
        let pos = g.slice_rows(pos_table, 0, tokens.len());
        g.add(scaled, pos)
    }

    /// Embedding + positions, then every block in encode mode. Padding
    /// tokens are masked out of the attention keys, so they cannot
    /// influence non-padding positions.
    pub fn encode_side(
        &self,
        g: &mut Graph<F>,
        side: Side,
        tokens: &[u32],
    ) -> Result<NodeId, NmtError> {
        self.check_tokens(tokens)?;
        let states = self.embed_with_positions(g, tokens);
        let pads: Vec<bool> = tokens.iter().map(|&t| t == PAD).collect();
        let mask = pads
            .iter()
            .any(|p| *p)
            .then(|| key_padding_mask::<F>(tokens.len(), &pads));
        self.side(side).run_encode(g, states, mask.as_ref())
    }

    /// Spec-facing encode: the primal direction's source encoder.
    pub fn encode(&self, g: &mut Graph<F>, tokens: &[u32]) -> Result<NodeId, NmtError> {
        self.encode_side(g, Side::A, tokens)
    }

    fn expert_of_sos(&self, id: u32) -> Option<usize> {
        let z = id.checked_sub(FIRST_SOS)? as usize;
        (z < self.cfg.expert_count).then_some(z)
    }

    /// Teacher-forced decode. `target_input` must begin with an expert SOS
    /// token; position i of the returned states predicts the i-th target
    /// token. Returns `(states [m×d], logits [m×V])` with the output
    /// projection tied to the embedding table.
    pub fn decode_side(
        &self,
        g: &mut Graph<F>,
        side: Side,
        context: NodeId,
        context_pads: &[bool],
        target_input: &[u32],
    ) -> Result<(NodeId, NodeId), NmtError> {
        self.check_tokens(target_input)?;
        if self.expert_of_sos(target_input[0]).is_none() {
            return Err(NmtError::MissingSos {
                got: target_input[0],
            });
        }
        let m = target_input.len();
        let states_in = self.embed_with_positions(g, target_input);
        let self_mask = causal_mask::<F>(m);
        let cross_mask = context_pads
            .iter()
            .any(|p| *p)
            .then(|| key_padding_mask::<F>(m, context_pads));
        let states = self.side(side).run_decode(
            g,
            states_in,
            context,
            Some(&self_mask),
            cross_mask.as_ref(),
        )?;
        let table = g.param(&self.embedding);
        let table_t = g.transpose(table);
        let raw = g.matmul(states, table_t);
        let mask = g.leaf(&self.logit_mask);
        let logits = g.add_row(raw, mask);
        Ok((states, logits))
    }

    /// Sum of token cross-entropies of `targets` under expert `expert`,
    /// added to an existing graph that already holds the encoder context.
    fn nll_node(
        &self,
        g: &mut Graph<F>,
        dec_side: Side,
        context: NodeId,
        context_pads: &[bool],
        targets: &[u32],
        expert: usize,
    ) -> Result<NodeId, NmtError> {
        if expert >= self.cfg.expert_count {
            return Err(NmtError::ExpertOutOfRange {
                expert,
                count: self.cfg.expert_count,
            });
        }
        if targets.is_empty() {
            return Err(NmtError::EmptySequence);
        }
        let mut input = Vec::with_capacity(targets.len());
        input.push(FIRST_SOS + expert as u32);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        let (_, logits) = self.decode_side(g, dec_side, context, context_pads, &input)?;
        let lsm = g.log_softmax(logits);
        let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let picked = g.pick_per_row(lsm, &idx);
        let total = g.sum(picked);
        Ok(g.scale(total, -1.0))
    }

    /// Encode once, evaluate every expert's NLL on the same context.
    pub fn mixture_nodes(
        &self,
        g: &mut Graph<F>,
        dir: Direction,
        encode_tokens: &[u32],
        decode_targets: &[u32],
    ) -> Result<MixtureNodes, NmtError> {
        let (enc_side, dec_side) = dir.sides();
        let context = self.encode_side(g, enc_side, encode_tokens)?;
        let pads: Vec<bool> = encode_tokens.iter().map(|&t| t == PAD).collect();
        let mut losses = Vec::with_capacity(self.cfg.expert_count);
        let mut nlls = Vec::with_capacity(self.cfg.expert_count);
        for expert in 0..self.cfg.expert_count {
            let node = self.nll_node(g, dec_side, context, &pads, decode_targets, expert)?;
            nlls.push(g.scalar_value(node).to_f64());
            losses.push(node);
        }
        let r = responsibility(&nlls);
        let winner = r.iter().position(|v| *v == 1.0).expect("one-hot");
        Ok(MixtureNodes {
            losses,
            nlls,
            winner,
        })
    }

    /// Sequence NLL of `y` given `x` under one expert (primal direction).
    pub fn expert_nll(&self, x: &[u32], y: &[u32], expert: usize) -> Result<f64, NmtError> {
        self.expert_nll_dir(Direction::Primal, x, y, expert)
    }

    pub fn expert_nll_dir(
        &self,
        dir: Direction,
        encode_tokens: &[u32],
        decode_targets: &[u32],
        expert: usize,
    ) -> Result<f64, NmtError> {
        let mut g = Graph::new();
        let (enc_side, dec_side) = dir.sides();
        let context = self.encode_side(&mut g, enc_side, encode_tokens)?;
        let pads: Vec<bool> = encode_tokens.iter().map(|&t| t == PAD).collect();
        let node = self.nll_node(&mut g, dec_side, context, &pads, decode_targets, expert)?;
        Ok(g.scalar_value(node).to_f64())
    }

    /// Hard-EM mixture loss: exactly the minimum per-expert NLL.
    pub fn mixture_loss(&self, x: &[u32], y: &[u32]) -> Result<f64, NmtError> {
        let mut g = Graph::new();
        let mix = self.mixture_nodes(&mut g, Direction::Primal, x, y)?;
        Ok(mix.nlls[mix.winner])
    }

    /// One model-level dual training step on a single pair: a primal update
    /// (encode x with EncA, decode y with EncB) followed by a dual update
    /// (encode y with EncB, decode x with EncA), each through the mixture
    /// loss of its winning expert. Targets carry a terminating EOS so decode
    /// can learn to stop. Returns the two losses.
    pub fn dual_train_step(
        &mut self,
        pair: &ParallelPair,
        adam: &Adam,
    ) -> Result<(f64, f64), NmtError> {
        let primal = self.batch_update(Direction::Primal, std::slice::from_ref(pair), adam)?;
        let dual = self.batch_update(Direction::Dual, std::slice::from_ref(pair), adam)?;
        Ok((primal, dual))
    }

    /// Accumulate mixture-loss gradients over a batch for one direction,
    /// then apply a single optimizer step. Returns the mean winning NLL.
    pub fn batch_update(
        &mut self,
        dir: Direction,
        batch: &[ParallelPair],
        adam: &Adam,
    ) -> Result<f64, NmtError> {
        assert!(!batch.is_empty());
        let inv = F::from_f64(1.0 / batch.len() as f64);
        let mut total = 0.0;
        for pair in batch {
            let (enc_tokens, mut dec_targets) = match dir {
                Direction::Primal => (pair.source.clone(), pair.target.clone()),
                Direction::Dual => (pair.target.clone(), pair.source.clone()),
            };
            dec_targets.push(EOS);
            let mut g = Graph::new();
            let mix = self.mixture_nodes(&mut g, dir, &enc_tokens, &dec_targets)?;
            total += mix.nlls[mix.winner];
            g.backward(mix.losses[mix.winner], inv);
            accumulate_grads(&g, self.params_mut());
        }
        adam.step(self.params_mut())?;
        Ok(total / batch.len() as f64)
    }

    /// One epoch of model-level dual training (or primal-only when `dual`
    /// is false, for the ablation baseline).
    pub fn train_epoch(
        &mut self,
        pairs: &[ParallelPair],
        adam: &Adam,
        batch_size: usize,
        dual: bool,
        rng: &mut SeededRng,
    ) -> Result<EpochStats, NmtError> {
        assert!(batch_size >= 1);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.shuffle(&mut order);
        let mut primal_sum = 0.0;
        let mut dual_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<ParallelPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            primal_sum += self.batch_update(Direction::Primal, &batch, adam)?;
            if dual {
                dual_sum += self.batch_update(Direction::Dual, &batch, adam)?;
            }
            batches += 1;
        }
        Ok(EpochStats {
            primal_loss: primal_sum / batches as f64,
            dual_loss: dual.then_some(dual_sum / batches as f64),
        })
    }

    /// Greedy argmax decoding from one expert until EOS or `max_len` tokens.
    /// Returns the generated tokens (no SOS/EOS) and a truncation flag.
    pub fn greedy_decode(
        &self,
        x: &[u32],
        expert: usize,
        max_len: usize,
    ) -> Result<(Vec<u32>, bool), NmtError> {
        assert!(max_len >= 1);
        if expert >= self.cfg.expert_count {
            return Err(NmtError::ExpertOutOfRange {
                expert,
                count: self.cfg.expert_count,
            });
        }
        let sos = FIRST_SOS + expert as u32;
        let mut generated: Vec<u32> = Vec::new();
        loop {
            let mut g = Graph::new();
            let context = self.encode_side(&mut g, Side::A, x)?;
            let pads: Vec<bool> = x.iter().map(|&t| t == PAD).collect();
            let mut input = vec![sos];
            input.extend_from_slice(&generated);
            let (_, logits) = self.decode_side(&mut g, Side::B, context, &pads, &input)?;
            let row_start = (input.len() - 1) * self.cfg.vocab_size;
            let row = &g.values(logits)[row_start..row_start + self.cfg.vocab_size];
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            if best as u32 == EOS {
                return Ok((generated, false));
            }
            generated.push(best as u32);
            if generated.len() >= max_len || input.len() + 1 >= self.cfg.max_len {
                return Ok((generated, true));
            }
        }
    }

    /// Teacher-forced next-token distributions: row i is p(·| x, y_<i)
    /// under the given expert; rows sum to 1 and there is one row per
    /// target token.
    pub fn token_distributions(
        &self,
        x: &[u32],
        y: &[u32],
        expert: usize,
    ) -> Result<Vec<Vec<F>>, NmtError> {
        if expert >= self.cfg.expert_count {
            return Err(NmtError::ExpertOutOfRange {
                expert,
                count: self.cfg.expert_count,
            });
        }
        if y.is_empty() {
            return Err(NmtError::EmptySequence);
        }
        let mut g = Graph::new();
        let context = self.encode_side(&mut g, Side::A, x)?;
        let pads: Vec<bool> = x.iter().map(|&t| t == PAD).collect();
        let mut input = Vec::with_capacity(y.len());
        input.push(FIRST_SOS + expert as u32);
        input.extend_from_slice(&y[..y.len() - 1]);
        let (_, logits) = self.decode_side(&mut g, Side::B, context, &pads, &input)?;
        let probs = g.softmax(logits, 1);
        let v = self.cfg.vocab_size;
        Ok((0..y.len())
            .map(|i| g.values(probs)[i * v..(i + 1) * v].to_vec())
            .collect())
    }

    /// Decoder states and distributions for feature extraction: one pass,
    /// expert-conditioned. Returns (states rows, probability rows).
    #[allow(clippy::type_complexity)]
    pub fn states_and_distributions(
        &self,
        x: &[u32],
        y: &[u32],
        expert: usize,
    ) -> Result<(Vec<Vec<F>>, Vec<Vec<F>>), NmtError> {
        if y.is_empty() {
            return Err(NmtError::EmptySequence);
        }
        let mut g = Graph::new();
        let context = self.encode_side(&mut g, Side::A, x)?;
        let pads: Vec<bool> = x.iter().map(|&t| t == PAD).collect();
        let mut input = Vec::with_capacity(y.len());
        input.push(
            FIRST_SOS
                + u32::try_from(expert).map_err(|_| NmtError::ExpertOutOfRange {
                    expert,
                    count: self.cfg.expert_count,
                })?,
        );
        input.extend_from_slice(&y[..y.len() - 1]);
        let (states, logits) = self.decode_side(&mut g, Side::B, context, &pads, &input)?;
        let probs = g.softmax(logits, 1);
        let d = self.cfg.d;
        let v = self.cfg.vocab_size;
        let state_rows = (0..y.len())
            .map(|i| g.values(states)[i * d..(i + 1) * d].to_vec())
            .collect();
        let prob_rows = (0..y.len())
            .map(|i| g.values(probs)[i * v..(i + 1) * v].to_vec())
            .collect();
        Ok((state_rows, prob_rows))
    }

    /// Source-free target encoding rows (EncB in encode mode).
    pub fn target_encoding(&self, y: &[u32]) -> Result<Vec<Vec<F>>, NmtError> {
        let mut g = Graph::new();
        let states = self.encode_side(&mut g, Side::B, y)?;
        let d = self.cfg.d;
        Ok((0..y.len())
            .map(|i| g.values(states)[i * d..(i + 1) * d].to_vec())
            .collect())
    }

    /// Embedding row of one token.
    pub fn embedding_row(&self, token: u32) -> &[F] {
        let d = self.cfg.d;
        &self.embedding.tensor.values[token as usize * d..(token as usize + 1) * d]
    }

    /// Fraction of teacher-forced positions (EOS included) whose argmax
    /// logit hits the target token.
    pub fn teacher_forced_accuracy(
        &self,
        dir: Direction,
        pairs: &[ParallelPair],
        expert: usize,
    ) -> Result<f64, NmtError> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for pair in pairs {
            let (enc_tokens, mut targets) = match dir {
                Direction::Primal => (pair.source.clone(), pair.target.clone()),
                Direction::Dual => (pair.target.clone(), pair.source.clone()),
            };
            targets.push(EOS);
            let mut g = Graph::new();
            let (enc_side, dec_side) = dir.sides();
            let context = self.encode_side(&mut g, enc_side, &enc_tokens)?;
            let pads: Vec<bool> = enc_tokens.iter().map(|&t| t == PAD).collect();
            let mut input = Vec::with_capacity(targets.len());
            input.push(FIRST_SOS + expert as u32);
            input.extend_from_slice(&targets[..targets.len() - 1]);
            let (_, logits) = self.decode_side(&mut g, dec_side, context, &pads, &input)?;
            let v = self.cfg.vocab_size;
            for (i, &t) in targets.iter().enumerate() {
                let row = &g.values(logits)[i * v..(i + 1) * v];
                let mut best = 0usize;
                for (j, val) in row.iter().enumerate() {
                    if *val > row[best] {
                        best = j;
                    }
                }
                total += 1;
                if best as u32 == t {
                    hit += 1;
                }
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = vec![&self.embedding];
        out.extend(self.enc_a.params());
        out.extend(self.enc_b.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.enc_a.params_mut());
        out.extend(self.enc_b.params_mut());
        out
    }

    pub fn save(&self, dir: &std::path::Path, vocab_fp: u64) -> Result<(), CheckpointError> {
        checkpoint::save_checkpoint(dir, CHECKPOINT_KIND, vocab_fp, &self.cfg, &self.params())
    }
}

impl DualPredictor<f32> {
    pub fn load_from(loaded: &LoadedCheckpoint) -> Result<Self, CheckpointError> {
        loaded.expect_kind(CHECKPOINT_KIND)?;
        let cfg: NmtConfig = loaded.hyper()?;
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
    use crate::corpus::Vocabulary;

    fn tiny_cfg(vocab: &Vocabulary) -> NmtConfig {
        NmtConfig {
            vocab_size: vocab.size(),
            d: 16,
            heads: 2,
            layers: 2,
            ff: 24,
            expert_count: vocab.expert_count(),
            reserved_sos: vocab.expert_count(),
            max_len: 32,
        }
    }

    fn setup() -> (Vocabulary, DualPredictor<f64>) {
        let vocab = Vocabulary::synthetic(20, 3);
        let model = DualPredictor::<f64>::init(tiny_cfg(&vocab), 7);
        (vocab, model)
    }

    fn content(vocab: &Vocabulary, offsets: &[u32]) -> Vec<u32> {
        offsets.iter().map(|o| vocab.content_start() + o).collect()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 3, 5, 1]);
        let mut g = Graph::new();
        let out = model.encode(&mut g, &x).unwrap();
        assert_eq!(g.shape(out), &[4, 16]);
        let mut g2 = Graph::new();
        let out2 = model.encode(&mut g2, &x).unwrap();
        assert_eq!(g.values(out), g2.values(out2));
    }

    #[test]
    fn encode_rejects_empty() {
        let (_, model) = setup();
        let mut g = Graph::new();
        assert!(matches!(
            model.encode(&mut g, &[]),
            Err(NmtError::EmptySequence)
        ));
    }

    #[test]
    fn padding_does_not_influence_real_positions() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 3, 5]);
        let mut padded = x.clone();
        padded.extend([PAD, PAD]);
        let mut g = Graph::new();
        let plain = model.encode(&mut g, &x).unwrap();
        let mut g2 = Graph::new();
        let with_pad = model.encode(&mut g2, &padded).unwrap();
        let d = model.cfg.d;
        assert_eq!(
            g.values(plain)[..3 * d],
            g2.values(with_pad)[..3 * d],
            "padding region leaked into real positions"
        );
    }

    #[test]
    fn decode_requires_expert_sos() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 1, 2, 3]);
        let mut g = Graph::new();
        let ctx = model.encode(&mut g, &x).unwrap();
        let err = model
            .decode_side(&mut g, Side::B, ctx, &[false; 4], &x)
            .unwrap_err();
        assert!(matches!(err, NmtError::MissingSos { .. }));
    }

    #[test]
    fn decode_is_causal() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 1, 2, 3]);
        let y = content(&vocab, &[4, 5, 6]);
        let mut perturbed = y.clone();
        perturbed[1] = vocab.content_start() + 9;
        let dist = model.token_distributions(&x, &y, 0).unwrap();
        let dist_p = model.token_distributions(&x, &perturbed, 0).unwrap();
        // Rows 0 and 1 depend only on y_<1 and y_<2; perturbing y[1]
        // changes the input that row 2 sees, but rows 0..=1 must be
        // unchanged.
        assert_eq!(dist[0], dist_p[0]);
        assert_eq!(dist[1], dist_p[1]);
        assert_ne!(dist[2], dist_p[2]);
    }

    #[test]
    fn distribution_rows_sum_to_one_and_count_matches() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 1, 2, 3, 4]);
        let y = content(&vocab, &[5, 6, 7, 8]);
        let dist = model.token_distributions(&x, &y, 1).unwrap();
        assert_eq!(dist.len(), y.len());
        for row in &dist {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn states_count_matches_targets() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 1, 2]);
        let y = content(&vocab, &[3, 4, 5, 6]);
        let (states, probs) = model.states_and_distributions(&x, &y, 0).unwrap();
        assert_eq!(states.len(), y.len());
        assert_eq!(probs.len(), y.len());
        assert_eq!(states[0].len(), model.cfg.d);
    }

    #[test]
    fn uniform_model_nll_is_len_times_log_support() {
        let vocab = Vocabulary::synthetic(20, 2);
        let mut cfg = tiny_cfg(&vocab);
        cfg.expert_count = 2;
        cfg.reserved_sos = 2;
        let model = DualPredictor::<f64>::init_zeroed(cfg);
        let x = content(&vocab, &[0, 1, 2]);
        let y = content(&vocab, &[3, 4, 5, 6, 7]);
        let nll = model.expert_nll(&x, &y, 0).unwrap();
        // Uniform logits spread mass over the output support (the
        // vocabulary minus never-generated specials).
        let expected = y.len() as f64 * (model.output_support() as f64).ln();
        assert!((nll - expected).abs() < 1e-9, "{nll} vs {expected}");
        assert!(nll >= 0.0);
    }

    #[test]
    fn responsibility_examples() {
        assert_eq!(responsibility(&[2.0, 1.5, 3.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(responsibility(&[0.4]), vec![1.0]);
        assert_eq!(responsibility(&[1.0, 1.0, 1.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn mixture_loss_is_bit_exact_min_of_expert_nlls() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 4, 2, 6]);
        let y = content(&vocab, &[1, 3, 5]);
        let mix = model.mixture_loss(&x, &y).unwrap();
        let nlls: Vec<f64> = (0..3)
            .map(|z| model.expert_nll(&x, &y, z).unwrap())
            .collect();
        let min = nlls.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(mix.to_bits(), min.to_bits());
    }

    #[test]
    fn losing_experts_sos_rows_get_zero_gradient() {
        let (vocab, mut model) = setup();
        let x = content(&vocab, &[0, 4, 2, 6]);
        let y = content(&vocab, &[1, 3, 5]);
        let mut g = Graph::new();
        let mix = model
            .mixture_nodes(&mut g, Direction::Primal, &x, &y)
            .unwrap();
        g.backward(mix.losses[mix.winner], 1.0);
        accumulate_grads(&g, model.params_mut());
        let d = model.cfg.d;
        let grad = model.embedding.tensor.grad.as_ref().unwrap();
        for z in 0..model.cfg.expert_count {
            let row = (FIRST_SOS as usize + z) * d;
            let row_grad = &grad[row..row + d];
            if z == mix.winner {
                assert!(row_grad.iter().any(|v| *v != 0.0), "winner row has gradient");
            } else {
                assert!(
                    row_grad.iter().all(|v| *v == 0.0),
                    "losing expert {z} received gradient"
                );
            }
        }
    }

    #[test]
    fn dual_step_touches_one_parameter_set_and_is_deterministic() {
        let run = || {
            let vocab = Vocabulary::synthetic(20, 3);
            let mut model = DualPredictor::<f64>::init(tiny_cfg(&vocab), 7);
            let pair = ParallelPair {
                source: content(&vocab, &[0, 1, 2, 3]),
                target: content(&vocab, &[3, 2, 1, 0]),
                style_id: None,
            };
            let adam = Adam::with_lr(1e-3);
            let mut losses = Vec::new();
            for _ in 0..3 {
                let (p, d) = model.dual_train_step(&pair, &adam).unwrap();
                assert!(p.is_finite() && p > 0.0);
                assert!(d.is_finite() && d > 0.0);
                losses.push((p, d));
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn both_directions_gradients_reach_shared_embedding() {
        let (vocab, mut model) = setup();
        let pair = ParallelPair {
            source: content(&vocab, &[0, 1, 2, 3]),
            target: content(&vocab, &[3, 2, 1, 0]),
            style_id: None,
        };
        for dir in [Direction::Primal, Direction::Dual] {
            let (enc, mut dec) = match dir {
                Direction::Primal => (pair.source.clone(), pair.target.clone()),
                Direction::Dual => (pair.target.clone(), pair.source.clone()),
            };
            dec.push(EOS);
            let mut g = Graph::new();
            let mix = model.mixture_nodes(&mut g, dir, &enc, &dec).unwrap();
            g.backward(mix.losses[mix.winner], 1.0);
            accumulate_grads(&g, model.params_mut());
            let grad = model.embedding.tensor.grad.as_ref().unwrap();
            assert!(grad.iter().any(|v| *v != 0.0));
            for p in model.params_mut() {
                p.clear_grad();
            }
        }
    }

    #[test]
    fn greedy_decode_respects_max_len() {
        let (vocab, model) = setup();
        let x = content(&vocab, &[0, 1, 2, 3]);
        let (tokens, _) = model.greedy_decode(&x, 0, 1).unwrap();
        assert!(tokens.len() <= 1);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let vocab = Vocabulary::synthetic(12, 2);
        let cfg = NmtConfig {
            vocab_size: vocab.size(),
            d: 8,
            heads: 2,
            layers: 1,
            ff: 12,
            expert_count: 2,
            reserved_sos: 2,
            max_len: 16,
        };
        let model = DualPredictor::<f32>::init(cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), vocab.fingerprint()).unwrap();
        let loaded = DualPredictor::load(dir.path(), vocab.fingerprint()).unwrap();
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u32> = a.tensor.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.tensor.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {} changed", a.name);
        }
        // Wrong vocabulary is refused.
        let other = Vocabulary::synthetic(13, 2);
        assert!(DualPredictor::load(dir.path(), other.fingerprint()).is_err());
    }
}
