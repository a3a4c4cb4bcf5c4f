//! Desk-scale translation quality estimation.
//!
//! The pipeline follows the predictor–estimator architecture: neural word
//! predictors (a dual-learning mixture-of-experts NMT model and a small
//! cross-lingual masked LM) are trained on parallel data and used as feature
//! extractors; a shared-weight Bi-GRU estimator maps those features to
//! sentence-level HTER scores and word/gap OK/BAD tags. Everything runs on
//! synthetic parallel corpora with known ground truth, so the whole system is
//! verifiable end to end on a laptop.
//!
//! Module map:
//! - [`nn`]: reverse-mode differentiable tensor engine and layers
//! - [`corpus`]: vocabulary, mini-BPE, synthetic data, QE labels, file I/O
//! - [`nmt`]: dual-learning mixture-of-experts NMT predictor
//! - [`xlm`]: cross-lingual masked language model (MLM + TLM)
//! - [`features`]: per-token QE feature assembly for both predictor streams
//! - [`estimator`]: shared Bi-GRU estimator heads and stacking ensemble
//! - [`eval`]: Pearson/MAE/RMSE/MCC/F1/BLEU metrics
//! - [`filter`]: QE-driven bilingual corpus filtering
//! - [`pipeline`]: end-to-end training, ablation and the filtering experiment
//! - [`checkpoint`]: manifest + binary weight file format
//! - [`config`]: run configuration with defaults and JSON round-trip

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod estimator;
pub mod eval;
pub mod features;
pub mod filter;
pub mod nmt;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod xlm;
