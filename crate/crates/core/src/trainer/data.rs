use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::corpus::{generate_scene, CorpusConfig, Sample};
use crate::foundation::{AggMode, FoundationEncoder};
use crate::image::Image;
use crate::tokenizers::{rasterize, TextVocab, Vocabulary, VqTokenizer};

/// Which corpus seeds make up the training and held-out sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub heldout_size: usize,
    /// Held-out scene `i` uses corpus seed `heldout_seed_offset + i`.
    pub heldout_seed_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_size: 4096, heldout_size: 200, heldout_seed_offset: 1_000_000 }
    }
}

impl DataConfig {
    pub fn train_samples(&self, corpus: &CorpusConfig) -> Result<Vec<Sample>> {
        (0..self.train_size as u64).map(|s| Ok(generate_scene(s, corpus)?)).collect()
    }

    pub fn heldout_samples(&self, corpus: &CorpusConfig) -> Result<Vec<Sample>> {
        (0..self.heldout_size as u64).map(|i| Ok(generate_scene(self.heldout_seed_offset + i, corpus)?)).collect()
    }
}

/// Pre-tokenized pairs: padded caption ids, raster image ids and, when an
/// encoder is configured, the global visual feature of every target image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSet {
    pub vocab: Vocabulary,
    pub max_text_len: usize,
    pub grid: (usize, usize),
    pub captions: Vec<String>,
    pub text: Vec<Vec<u32>>,
    pub image: Vec<Vec<u32>>,
    pub f_gf: Vec<Vec<f32>>,
}

const ENCODE_CHUNK: usize = 64;

impl TokenizedSet {
    pub fn build(
        samples: &[Sample],
        text_vocab: &TextVocab,
        tokenizer: &VqTokenizer<f32>,
        encoder: Option<(&FoundationEncoder<f32>, AggMode)>,
        max_text_len: usize,
    ) -> Result<Self> {
        let first = samples.first().ok_or_else(|| TrainError::Config("empty dataset".into()))?;
        let grid = tokenizer.grid_size(first.image.height, first.image.width)?;
        let vocab = Vocabulary { text_size: text_vocab.len(), codebook_size: tokenizer.config.codebook_size };
        let mut set = TokenizedSet {
            vocab,
            max_text_len,
            grid,
            captions: Vec::with_capacity(samples.len()),
            text: Vec::with_capacity(samples.len()),
            image: Vec::with_capacity(samples.len()),
            f_gf: Vec::new(),
        };
        for s in samples {
            set.captions.push(s.caption.clone());
            set.text.push(text_vocab.encode_padded(&s.caption, max_text_len)?.0);
            set.image.push(rasterize(&vocab, &tokenizer.encode_codes(&s.image)?));
        }
        if let Some((enc, agg)) = encoder {
            for chunk in samples.chunks(ENCODE_CHUNK) {
                let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
                set.f_gf.extend(enc.global_batch(&imgs, agg)?);
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn image_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.f_gf.first().map(Vec::len)
    }
}
