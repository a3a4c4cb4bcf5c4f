//! Vocabulary, mini-BPE tokenization, synthetic parallel data, QE label
//! synthesis and dataset file I/O.

mod bpe;
mod dataset;
mod files;
mod label;
mod synth;
mod vocab;

pub use bpe::{segment, segment_sentence, train_bpe, MergeTable};
pub use dataset::{
    make_qe_dataset, DatasetStats, QeDataConfig, QeDataset, QESample, SplitStats,
};
pub use files::{
    load_parallel, load_qe_dataset, load_qe_split, save_parallel, save_qe_dataset, save_qe_split,
};
pub use label::{compute_hter, corrupt, levenshtein, CorruptionRates, Tag};
pub use synth::{gen_parallel, style_maps, ParallelPair, StyleMaps};
pub use vocab::{Vocabulary, EOS, FIRST_SOS, LANG_SRC, LANG_TGT, MASK, PAD, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("HTER is undefined for an empty translation")]
    EmptyMt,
    #[error("invalid corruption rates: {0}")]
    InvalidRates(String),
    #[error("requested {requested} styles but only {available} distinct mapping tables exist")]
    TooManyStyles { requested: usize, available: u128 },
    #[error("{file}:{line}: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("line counts disagree: {file_a} has {count_a}, {file_b} has {count_b}")]
    LineCount {
        file_a: String,
        count_a: usize,
        file_b: String,
        count_b: usize,
    },
    #[error("dataset needs at least one pair")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("vocabulary file: {0}")]
    VocabFile(String),
}
