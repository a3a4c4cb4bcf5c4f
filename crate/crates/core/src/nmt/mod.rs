//! Dual-learning mixture-of-experts NMT predictor.
//!
//! Two unified conditional encoders share one embedding table and swap
//! encode/decode roles between the primal (source→target) and dual
//! (target→source) translation tasks, so a single parameter set is trained
//! on both directions. Mixture experts are start-of-sentence tokens; each
//! sample trains only the expert with the lowest sequence NLL (hard EM
//! under a uniform prior).

mod block;
mod predictor;

pub use block::{BlockMode, UnifiedBlock};
pub use predictor::{
    output_logit_mask, output_support_size, responsibility, Direction, DualPredictor, EpochStats,
    MixtureNodes, NmtConfig, Side, CHECKPOINT_KIND,
};

use crate::nn::{LayerError, OptimError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds the model's max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoder input must start with an expert start token, got id {got}")]
    MissingSos { got: u32 },
    #[error("expert {expert} out of range (model has {count})")]
    ExpertOutOfRange { expert: usize, count: usize },
    #[error("token id {id} out of vocabulary range {size}")]
    TokenRange { id: u32, size: usize },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}
