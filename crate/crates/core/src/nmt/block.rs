//! The unified conditional encoder block.
//!
//! Structurally a transformer decoder block; the mode decides what its
//! second attention layer does. Decoding cross-attends over the encoder
//! context. Encoding feeds zero tensors as queries and values instead, so
//! the branch contributes an exact zero through the residual connection and
//! the block behaves as a plain encoder block — one structure, two roles.
//!
//! Block workflow (note: no residual around the first self-attention):
//!
//! ```text
//! a = LayerNorm1(SelfAttention(e_prev))
//! b = LayerNorm2(a + CrossBranch)        CrossBranch = 0 when encoding
//! c = LayerNorm3(b + FeedForward(b))
//! ```

use super::NmtError;
use crate::nn::{
    AttentionWeights, FeedForward, Graph, LayerNormParams, NodeId, Parameter, Scalar, Tensor,
};
use crate::rng::SeededRng;

/// Per-call role of a block. Decoding requires the encoder context, so a
/// context-less decode cannot be expressed.
pub enum BlockMode<'a, F: Scalar> {
    Encode,
    Decode {
        context: NodeId,
        cross_mask: Option<&'a Tensor<F>>,
    },
}

#[derive(Debug, Clone)]
pub struct UnifiedBlock<F: Scalar> {
    pub self_attn: AttentionWeights<F>,
    pub cross_attn: AttentionWeights<F>,
    pub ffn: FeedForward<F>,
    pub ln1: LayerNormParams<F>,
    pub ln2: LayerNormParams<F>,
    pub ln3: LayerNormParams<F>,
}

impl<F: Scalar> UnifiedBlock<F> {
    pub fn init(name: &str, d: usize, heads: usize, ff: usize, rng: &mut SeededRng) -> Self {
        Self {
            self_attn: AttentionWeights::init(&format!("{name}.self_attn"), d, heads, rng),
            cross_attn: AttentionWeights::init(&format!("{name}.cross_attn"), d, heads, rng),
            ffn: FeedForward::init(&format!("{name}.ffn"), d, ff, rng),
            ln1: LayerNormParams::init(&format!("{name}.ln1"), d),
            ln2: LayerNormParams::init(&format!("{name}.ln2"), d),
            ln3: LayerNormParams::init(&format!("{name}.ln3"), d),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        e_prev: NodeId,
        mode: BlockMode<'_, F>,
        self_mask: Option<&Tensor<F>>,
    ) -> Result<NodeId, NmtError> {
        let a0 = self
            .self_attn
            .forward(g, e_prev, e_prev, e_prev, self_mask)?;
        let a = self.ln1.forward(g, a0);
        let cross = match mode {
            BlockMode::Encode => {
                // Zero queries and zero values over the previous states as
                // keys: the attention output is exactly zero, and so are the
                // gradients reaching the cross-attention weights.
                let shape = g.shape(a).to_vec();
                let zeros = g.constant(shape.clone(), vec![F::zero(); shape.iter().product()]);
                self.cross_attn.forward(g, zeros, e_prev, zeros, None)?
            }
            BlockMode::Decode {
                context,
                cross_mask,
            } => self.cross_attn.forward(g, a, context, context, cross_mask)?,
        };
        let b0 = g.add(a, cross);
        let b = self.ln2.forward(g, b0);
        let f = self.ffn.forward(g, b);
        let c0 = g.add(b, f);
        Ok(self.ln3.forward(g, c0))
    }

    /// Encode-mode forward with the cross branch elided entirely instead of
    /// computed-and-zero. Kept as the reference construction the regular
    /// encode path must match bit for bit.
    pub fn forward_encode_skipping_cross(
        &self,
        g: &mut Graph<F>,
        e_prev: NodeId,
        self_mask: Option<&Tensor<F>>,
    ) -> Result<NodeId, NmtError> {
        let a0 = self
            .self_attn
            .forward(g, e_prev, e_prev, e_prev, self_mask)?;
        let a = self.ln1.forward(g, a0);
        let b = self.ln2.forward(g, a);
        let f = self.ffn.forward(g, b);
        let c0 = g.add(b, f);
        Ok(self.ln3.forward(g, c0))
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = self.self_attn.params();
        out.extend(self.cross_attn.params());
        out.extend(self.ffn.params());
        out.extend(self.ln1.params());
        out.extend(self.ln2.params());
        out.extend(self.ln3.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = self.self_attn.params_mut();
        out.extend(self.cross_attn.params_mut());
        out.extend(self.ffn.params_mut());
        out.extend(self.ln1.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.ln3.params_mut());
        out
    }
}
