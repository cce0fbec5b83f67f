//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("max_size {max_size} must exceed the {specials} reserved special tokens")]
    VocabTooSmall { max_size: usize, specials: usize },

    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("cannot sample {n} records from a pool of {pool}")]
    SampleTooLarge { n: usize, pool: usize },

    #[error("instruction scaffold needs {needed} tokens but max_len is {max_len}")]
    InstructionTooLong { needed: usize, max_len: usize },

    #[error("input sequence already contains <mask>")]
    MaskInInput,

    #[error("no masked positions to score")]
    NoMaskedPositions,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
