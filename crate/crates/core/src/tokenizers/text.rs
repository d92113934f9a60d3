use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TokenizerError;
use crate::corpus::{Color, Shape};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const BOI: u32 = 2;
pub const EOI: u32 = 3;
pub const UNCOND: u32 = 4;
pub const REP: u32 = 5;

pub const SPECIALS: [&str; 6] = ["<PAD>", "<BOS>", "<BOI>", "<EOI>", "<UNCOND>", "<REP>"];

pub const DEFAULT_MAX_TEXT_LEN: usize = 16;

/// Word-level vocabulary over the caption grammar with reserved special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::grammar()
    }
}

impl TextVocab {
    /// Specials at ids `0..6`, then every grammar word.
    pub fn grammar() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let words = ["a", "and", "at", "in", "the", "top", "middle", "bottom", "left", "center", "right"];
        tokens.extend(words.iter().map(|s| s.to_string()));
        tokens.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        Self::from_tokens(tokens).expect("grammar vocab is valid")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Vocab(format!("duplicate token `{t}`")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if ids.get(*s) != Some(&(i as u32)) {
                return Err(TokenizerError::Vocab(format!("special `{s}` must have id {i}")));
            }
        }
        Ok(TextVocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// `[<BOS>, word ids...]`; unknown words are an error.
    pub fn encode(&self, caption: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut out = vec![BOS];
        for w in caption.split_whitespace() {
            match self.ids.get(w) {
                Some(&id) if !Self::is_special(id) => out.push(id),
                _ => return Err(TokenizerError::OutOfVocabulary(w.to_string())),
            }
        }
        Ok(out)
    }

    /// Encodes and right-pads with `<PAD>` to `max_len`; the mask is true on padding.
    pub fn encode_padded(&self, caption: &str, max_len: usize) -> Result<(Vec<u32>, Vec<bool>), TokenizerError> {
        let ids = self.encode(caption)?;
        pad_to(ids, max_len)
    }

    /// Words of `ids`, skipping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ids).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let ids: BTreeMap<String, u32> =
            serde_json::from_str(text).map_err(|e| TokenizerError::Vocab(e.to_string()))?;
        let mut tokens = vec![String::new(); ids.len()];
        for (t, &i) in &ids {
            let slot = tokens.get_mut(i as usize).ok_or_else(|| TokenizerError::Vocab(format!("id {i} not dense")))?;
            *slot = t.clone();
        }
        Self::from_tokens(tokens)
    }
}

/// The unconditional prompt `[<BOS>, <UNCOND>]`.
pub fn uncond_ids() -> Vec<u32> {
    vec![BOS, UNCOND]
}

pub fn pad_to(mut ids: Vec<u32>, max_len: usize) -> Result<(Vec<u32>, Vec<bool>), TokenizerError> {
    if ids.len() > max_len {
        return Err(TokenizerError::TooLong { len: ids.len(), max: max_len });
    }
    let mut mask = vec![false; ids.len()];
    mask.resize(max_len, true);
    ids.resize(max_len, PAD);
    Ok((ids, mask))
}

/// Combined vocabulary: text ids first, then `codebook_size` image ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub text_size: usize,
    pub codebook_size: usize,
}

impl Vocabulary {
    pub fn new(text: &TextVocab, codebook_size: usize) -> Self {
        Vocabulary { text_size: text.len(), codebook_size }
    }

    pub fn len(&self) -> usize {
        self.text_size + self.codebook_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_range(&self) -> std::ops::Range<u32> {
        self.text_size as u32..self.len() as u32
    }

    pub fn is_image_token(&self, id: u32) -> bool {
        self.image_range().contains(&id)
    }

    /// Codebook index of an image id.
    pub fn local_index(&self, id: u32) -> Option<usize> {
        self.is_image_token(id).then(|| id as usize - self.text_size)
    }

    pub fn image_id(&self, code: usize) -> u32 {
        debug_assert!(code < self.codebook_size);
        (self.text_size + code) as u32
    }
}

/// Row-major flattening of a code grid into image ids.
pub fn rasterize(vocab: &Vocabulary, grid: &[Vec<usize>]) -> Vec<u32> {
    grid.iter().flatten().map(|&c| vocab.image_id(c)).collect()
}

/// Inverse of [`rasterize`] for an `h x w` grid.
pub fn derasterize(vocab: &Vocabulary, ids: &[u32], h: usize, w: usize) -> Result<Vec<Vec<usize>>, TokenizerError> {
    if ids.len() != h * w {
        return Err(TokenizerError::Shape(format!("expected {} image tokens for a {h}x{w} grid, got {}", h * w, ids.len())));
    }
    let mut grid = vec![vec![0; w]; h];
    for (i, &id) in ids.iter().enumerate() {
        grid[i / w][i % w] =
            vocab.local_index(id).ok_or(TokenizerError::CodeOutOfRange { code: id as usize, size: vocab.len() })?;
    }
    Ok(grid)
}
