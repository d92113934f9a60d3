//! Word-level text tokenizer and the VQ image tokenizer.

mod text;
mod vq;

pub use text::{
    derasterize, pad_to, rasterize, uncond_ids, TextVocab, Vocabulary, BOI, BOS, DEFAULT_MAX_TEXT_LEN, EOI, PAD, REP,
    SPECIALS, UNCOND,
};
pub use vq::{VqConfig, VqLosses, VqTokenizer};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("token sequence of length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("code {code} out of range for size {size}")]
    CodeOutOfRange { code: usize, size: usize },
    #[error("invalid tokenizer config: {0}")]
    Config(String),
    #[error("bad tokenizer checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
