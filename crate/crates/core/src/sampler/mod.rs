//! Autoregressive image-token sampling with classifier-free guidance.
//!
//! Inference only needs the transformer and the VQ decoder. Neither the
//! foundation encoders nor the alignment head appear here.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::armodel::{build_prompt, ArError, ArModel, Decoder, Mechanism, ModeTag, Role};
use crate::image::Image;
use crate::numerics::{Float, Tensor};
use crate::tokenizers::{derasterize, pad_to, uncond_ids, TextVocab, TokenizerError, VqTokenizer};

type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sample config: {0}")]
    Config(String),
    #[error("sampling needs a t2i model, got {0}")]
    ModeTag(ModeTag),
    #[error("every image logit is masked or non-finite at image position {0}")]
    Degenerate(usize),
    #[error(transparent)]
    Model(#[from] ArError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub cfg_scale: f64,
    /// Argmax decoding; temperature and top-k are ignored.
    pub greedy: bool,
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { temperature: 1.0, top_k: 32, cfg_scale: 2.0, greedy: false, seed: 0, grid_h: 4, grid_w: 4 }
    }
}

impl SampleConfig {
    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(SampleError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == 0 || self.top_k > codebook_size {
            return Err(SampleError::Config(format!("top_k {} outside 1..={codebook_size}", self.top_k)));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(SampleError::Config(format!("cfg_scale must be nonnegative, got {}", self.cfg_scale)));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(SampleError::Config("empty image grid".into()));
        }
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Guided logits `(1 - s) * uncond + s * cond`; `s = 1` and `s = 0` return
/// `cond` and `uncond` bit for bit.
pub fn cfg_logits(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return cond.to_vec();
    }
    if scale == 0.0 {
        return uncond.to_vec();
    }
    cond.iter().zip(uncond).map(|(&c, &u)| (1.0 - scale) * u + scale * c).collect()
}

/// Sampling front end over a shared read-only model.
pub struct Sampler<'a, T: Float> {
    model: &'a ArModel<T>,
    mechanism: Mechanism,
    use_cache: bool,
}

impl<'a, T: Float> Sampler<'a, T> {
    pub fn new(model: &'a ArModel<T>, tag: ModeTag, mechanism: Mechanism) -> Result<Self> {
        if tag != ModeTag::T2i {
            return Err(SampleError::ModeTag(tag));
        }
        Ok(Sampler { model, mechanism, use_cache: true })
    }

    /// Recomputes every step from the full prefix instead of using the cache.
    pub fn uncached(mut self) -> Self {
        self.use_cache = false;
        self
    }

    /// Samples `grid_h * grid_w` image ids after the text span `s_t`
    /// (`<BOS>`-prefixed, padded to the training text length).
    pub fn sample_tokens(&self, s_t: &[u32], cfg: &SampleConfig) -> Result<Vec<u32>> {
        let vocab = self.model.vocab();
        cfg.validate(vocab.codebook_size)?;
        let (cond, cond_roles) = build_prompt(s_t, self.mechanism)?;
        let mut rows = vec![(cond, pads(&cond_roles))];
        let guided = cfg.cfg_scale != 1.0;
        if guided {
            let (u, _) = pad_to(uncond_ids(), s_t.len())?;
            let (ids, roles) = build_prompt(&u, self.mechanism)?;
            rows.push((ids, pads(&roles)));
        }
        let n = cfg.image_tokens();
        let total = rows[0].0.len() + n - 1;
        if total > self.model.config.max_len {
            return Err(ArError::TooLong { len: total, max: self.model.config.max_len }.into());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dec = Decoder::new(self.model, rows.len());
        let mut logits = self.feed(&mut dec, &rows, 0)?;
        let image = vocab.image_range();
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let width = logits.last_dim();
            let row = |r: usize| logits.row(r).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
            let mut l = if guided { cfg_logits(&row(0), &row(1), cfg.cfg_scale) } else { row(0) };
            for (id, v) in l.iter_mut().enumerate().take(width) {
                if !image.contains(&(id as u32)) || v.is_nan() {
                    *v = f64::NEG_INFINITY;
                }
            }
            let tok = pick(&l, cfg, &mut rng).ok_or(SampleError::Degenerate(step))? as u32;
            out.push(tok);
            if step + 1 == n {
                break;
            }
            let start = rows[0].0.len();
            for (ids, pad) in rows.iter_mut() {
                ids.push(tok);
                pad.push(false);
            }
            logits = if self.use_cache {
                self.feed(&mut dec, &rows, start)?
            } else {
                dec = Decoder::new(self.model, rows.len());
                self.feed(&mut dec, &rows, 0)?
            };
        }
        Ok(out)
    }

    /// Feeds positions `from..` of every row and returns the last logits.
    fn feed(&self, dec: &mut Decoder<'_, T>, rows: &[(Vec<u32>, Vec<bool>)], from: usize) -> Result<Tensor<T>> {
        let len = rows[0].0.len();
        let mut last = None;
        for t in from..len {
            let ids: Vec<u32> = rows.iter().map(|r| r.0[t]).collect();
            let pad: Vec<bool> = rows.iter().map(|r| r.1[t]).collect();
            last = Some(dec.step(&ids, &pad)?);
        }
        last.ok_or_else(|| SampleError::Config("empty prompt".into()))
    }
}

fn pads(roles: &[Role]) -> Vec<bool> {
    roles.iter().map(|&r| r == Role::Pad).collect()
}

/// Greedy or temperature/top-k draw over finite logits; `None` if nothing is finite.
fn pick(logits: &[f64], cfg: &SampleConfig, rng: &mut ChaCha8Rng) -> Option<usize> {
    let mut live: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    if live.is_empty() {
        return None;
    }
    // stable sort keeps the lowest id first among ties
    live.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    if cfg.greedy || cfg.top_k == 1 {
        return Some(live[0]);
    }
    live.truncate(cfg.top_k);
    let top = logits[live[0]] / cfg.temperature;
    let w: Vec<f64> = live.iter().map(|&i| (logits[i] / cfg.temperature - top).exp()).collect();
    let dist = WeightedIndex::new(&w).ok()?;
    Some(live[dist.sample(rng)])
}

/// Text in, pixels out.
#[derive(Clone, Debug)]
pub struct Generated {
    pub image: Image,
    pub tokens: Vec<u32>,
}

/// Encodes `caption` (padded to `max_text_len`), samples image ids and decodes them.
pub fn generate_image<T: Float>(
    sampler: &Sampler<'_, T>,
    text: &TextVocab,
    tokenizer: &VqTokenizer<T>,
    caption: &str,
    max_text_len: usize,
    cfg: &SampleConfig,
) -> Result<Generated> {
    let (s_t, _) = text.encode_padded(caption, max_text_len)?;
    let tokens = sampler.sample_tokens(&s_t, cfg)?;
    let grid = derasterize(&sampler.model.vocab(), &tokens, cfg.grid_h, cfg.grid_w)?;
    let image = tokenizer.vq_decode(&grid)?;
    Ok(Generated { image, tokens })
}

#[cfg(test)]
mod tests;
