//! Decoder-only transformer over the combined text and image vocabulary.

mod infer;
mod sequence;

pub use infer::Decoder;
pub use sequence::{build_prompt, build_sequence, build_text_sequence, loss_weights, Mechanism, Role, TokenSequence};

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{block_forward, init_block, init_layer_norm, init_linear, layer_norm, linear, AttnMask, BlockShape, INIT_STD};
use crate::numerics::{Container, Float, Graph, NumericsError, ParamStore, ParamVars, Tensor, Var};
use crate::tokenizers::Vocabulary;

type Result<T> = std::result::Result<T, ArError>;

#[derive(Debug, Error)]
pub enum ArError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("sequence of length {len} exceeds the model maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint mode tag mismatch: expected `{expected}`, found `{found}`")]
    ModeTag { expected: ModeTag, found: ModeTag },
    #[error("bad model checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// What a checkpoint has been trained to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeTag {
    TextOnly,
    T2i,
}

impl std::fmt::Display for ModeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModeTag::TextOnly => "text_only",
            ModeTag::T2i => "t2i",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArConfig {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longest input sequence (position table size).
    pub max_len: usize,
}

impl ArConfig {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Self {
        ArConfig { vocab, dim: 128, depth: 4, heads: 4, mlp_ratio: 4, max_len }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ArError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.depth == 0 || self.max_len == 0 || self.vocab.is_empty() {
            return Err(ArError::Config("depth, max_len and vocabulary must be nonempty".into()));
        }
        Ok(())
    }

    pub fn block(&self) -> BlockShape {
        BlockShape { dim: self.dim, heads: self.heads, mlp_ratio: self.mlp_ratio }
    }
}

/// Logits and per-layer hidden states of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    /// `[n, |V|]`
    pub logits: Tensor<T>,
    /// `depth + 1` entries of `[n, dim]`: embeddings, then each block's output.
    pub hidden: Vec<Tensor<T>>,
}

/// Tape nodes of a batched forward pass over `[batch * len]` positions.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub hidden: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ArModel<T: Float> {
    pub config: ArConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> ArModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ArConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let (v, d) = (config.vocab.len(), config.dim);
        p.insert("tok_emb", Tensor::randn(&[v, d], INIT_STD, rng));
        p.insert("pos_emb", Tensor::randn(&[config.max_len, d], INIT_STD, rng));
        for i in 0..config.depth {
            init_block(&mut p, &format!("b{i}"), config.block(), config.depth, rng);
        }
        init_layer_norm(&mut p, "ln_f", d);
        init_linear(&mut p, "head", d, v, INIT_STD, rng);
        Ok(ArModel { config, params: p })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.config.vocab
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let size = self.config.vocab.len();
        match ids.iter().find(|&&i| i as usize >= size) {
            Some(&id) => Err(ArError::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    /// Records a forward pass over `batch` equal-length sequences of `ids`
    /// (`[batch * len]`, row-major). `key_pad` marks padding keys.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        ids: &[u32],
        key_pad: &[bool],
        batch: usize,
    ) -> Result<ForwardVars> {
        if batch == 0 || ids.len() % batch != 0 || key_pad.len() != ids.len() {
            return Err(ArError::Shape(format!("{} ids and {} pad flags for batch {batch}", ids.len(), key_pad.len())));
        }
        let len = ids.len() / batch;
        if len > self.config.max_len {
            return Err(ArError::TooLong { len, max: self.config.max_len });
        }
        self.check_ids(ids)?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = g.gather_rows(p.get("tok_emb")?, &idx)?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(p.get("pos_emb")?, &pos_idx)?;
        let mut h = g.add(tok, pos)?;
        let mut hidden = vec![h];
        let mask = AttnMask { causal: true, key_pad: key_pad.iter().any(|&m| m).then_some(key_pad) };
        for i in 0..self.config.depth {
            h = block_forward(g, p, &format!("b{i}"), self.config.block(), h, batch, len, mask)?;
            hidden.push(h);
        }
        let n = layer_norm(g, p, "ln_f", h)?;
        let logits = linear(g, p, "head", n)?;
        Ok(ForwardVars { logits, hidden })
    }

    /// Forward pass over one sequence without recording gradients.
    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let out = self.forward_graph(&mut g, &p, &seq.ids, &seq.pad_mask(), 1)?;
        Ok(ForwardOutput {
            logits: g.value(out.logits).clone(),
            hidden: out.hidden.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Writes the model under `model/` with its config and mode tag.
    pub fn write_into(&self, c: &mut Container<T>, tag: ModeTag) {
        c.meta["model"] = serde_json::json!({ "config": self.config, "mode_tag": tag });
        for (n, t) in self.params.iter() {
            c.push(format!("model/{n}"), t.clone());
        }
    }

    /// Reads a model written by [`ArModel::write_into`], returning its mode tag.
    pub fn read_from(c: &Container<T>) -> Result<(Self, ModeTag)> {
        let meta = c.meta.get("model").ok_or_else(|| ArError::Checkpoint("no model block".into()))?;
        let config: ArConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| ArError::Checkpoint(e.to_string()))?;
        let tag: ModeTag = serde_json::from_value(meta["mode_tag"].clone()).map_err(|e| ArError::Checkpoint(e.to_string()))?;
        config.validate()?;
        let params: ParamStore<T> =
            c.entries.iter().filter_map(|(n, t)| n.strip_prefix("model/").map(|k| (k.to_string(), t.clone()))).collect();
        let model = ArModel { config, params };
        model.check_params()?;
        Ok((model, tag))
    }

    /// Reads a checkpoint and requires `expected` as its mode tag.
    pub fn read_tagged(c: &Container<T>, expected: ModeTag) -> Result<Self> {
        let (m, found) = Self::read_from(c)?;
        if found != expected {
            return Err(ArError::ModeTag { expected, found });
        }
        Ok(m)
    }

    fn check_params(&self) -> Result<()> {
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let want = ArModel::<T>::new(self.config, &mut rng)?;
        for (name, t) in want.params.iter() {
            let got = self.params.get(name).map_err(|_| ArError::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(ArError::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
            if !got.is_finite() {
                return Err(ArError::Checkpoint(format!("tensor `{name}` is not finite")));
            }
        }
        if self.params.len() != want.params.len() {
            return Err(ArError::Checkpoint("unexpected extra model tensors".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, tag: ModeTag) -> Result<()> {
        let mut c = Container::new(serde_json::json!({ "kind": "ar_model" }));
        self.write_into(&mut c, tag);
        Ok(c.save(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, ModeTag)> {
        Self::read_from(&Container::load(path)?)
    }
}


/// Mean cross-entropy over positions with nonzero weight.
pub fn ar_loss<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[u32], weights: &[T]) -> Result<Var> {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    Ok(g.cross_entropy(logits, &t, weights)?)
}

/// Weighted mean of the squared row log-partition `(log sum_v exp(logit_v))^2`.
pub fn z_loss<T: Float>(g: &mut Graph<T>, logits: Var, weights: &[T]) -> Result<Var> {
    let lse = g.logsumexp_rows(logits)?;
    let sq = g.mul(lse, lse)?;
    Ok(g.weighted_mean(sq, weights)?)
}
