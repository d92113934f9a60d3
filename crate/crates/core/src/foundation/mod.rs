//! Small stand-ins for frozen foundation encoders: a contrastive image-text
//! model with a CLS slot and a masked-patch reconstruction model without one.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::nn::{block_forward, init_block, init_layer_norm, init_linear, layer_norm, linear, AttnMask, BlockShape, INIT_STD};
use crate::numerics::{collect_grads, AdamW, Container, Float, Graph, NumericsError, ParamStore, ParamVars, Tensor, Var};
use crate::tokenizers::{pad_to, TextVocab, TokenizerError};

type Result<T> = std::result::Result<T, FoundationError>;

/// Norms below this are refused by [`normalize`].
pub const MIN_NORM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FoundationError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contrastive batch needs at least 2 distinct captions, got {0}")]
    BatchTooSmall(usize),
    #[error("cannot normalize a vector of norm {0:e}")]
    ZeroNorm(f64),
    #[error("bad encoder checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    CrossModal,
    VisionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggMode {
    Cls,
    #[serde(rename = "avgpool")]
    AvgPool,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoundationConfig {
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
    /// Fraction of patches hidden per image during reconstruction training.
    pub mask_ratio: f64,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        FoundationConfig {
            image_side: 32,
            patch: 8,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            max_text_len: crate::tokenizers::DEFAULT_MAX_TEXT_LEN,
            mask_ratio: 0.5,
        }
    }
}

impl FoundationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return Err(FoundationError::Config(format!("image side {} not divisible by patch {}", self.image_side, self.patch)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(FoundationError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.depth == 0 || self.max_text_len < 2 {
            return Err(FoundationError::Config("depth must be positive and max_text_len at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(FoundationError::Config("mask_ratio must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    fn block(&self) -> BlockShape {
        BlockShape { dim: self.dim, heads: self.heads, mlp_ratio: self.mlp_ratio }
    }
}

/// Per-patch features of one image, `[N, D]`; row 0 is the CLS slot when present.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<T> {
    pub rows: Tensor<T>,
    pub has_cls: bool,
}

impl<T: Float> PatchFeatures<T> {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.last_dim()
    }
}

/// Unit-length copy of `v`; errors when `||v|| < MIN_NORM`.
pub fn normalize<T: Float>(v: &[T]) -> Result<Vec<T>> {
    let n = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if !(n >= MIN_NORM) {
        return Err(FoundationError::ZeroNorm(n));
    }
    Ok(v.iter().map(|&x| T::of(x.as_f64() / n)).collect())
}

/// Global visual representation `agg(f_F)`, L2-normalized.
pub fn aggregate<T: Float>(f: &PatchFeatures<T>, mode: AggMode) -> Result<Vec<T>> {
    let d = f.dim();
    let start = usize::from(f.has_cls);
    if f.len() <= start {
        return Err(FoundationError::Shape("no patch rows to aggregate".into()));
    }
    let avg = || {
        let mut acc = vec![0.0f64; d];
        for r in start..f.len() {
            for (a, &x) in acc.iter_mut().zip(f.rows.row(r)) {
                *a += x.as_f64();
            }
        }
        let n = (f.len() - start) as f64;
        acc.into_iter().map(|a| T::of(a / n)).collect::<Vec<T>>()
    };
    let need_cls = || {
        if f.has_cls {
            Ok(())
        } else {
            Err(FoundationError::Config("features have no CLS row; use avgpool".into()))
        }
    };
    match mode {
        AggMode::Cls => {
            need_cls()?;
            normalize(f.rows.row(0))
        }
        AggMode::AvgPool => normalize(&avg()),
        AggMode::Concat => {
            need_cls()?;
            let mut v = f.rows.row(0).to_vec();
            v.extend(avg());
            normalize(&v)
        }
    }
}

/// Symmetric InfoNCE over `[b, d]` image and text embeddings at logit scale `scale` (a one-element node).
pub fn info_nce<T: Float>(g: &mut Graph<T>, img: Var, txt: Var, scale: Var) -> Result<Var> {
    let b = g.shape(img)[0];
    let logits = g.matmul_t(img, txt, false, true)?;
    let logits = g.scale_by(logits, scale)?;
    let logits_t = g.matmul_t(txt, img, false, true)?;
    let logits_t = g.scale_by(logits_t, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    let w = vec![T::one(); b];
    let a = g.cross_entropy(logits, &targets, &w)?;
    let c = g.cross_entropy(logits_t, &targets, &w)?;
    let s = g.add(a, c)?;
    Ok(g.scale(s, T::of(0.5)))
}

/// Foundation encoder with frozen-at-use parameters.
#[derive(Clone, Debug)]
pub struct FoundationEncoder<T: Float> {
    pub kind: EncoderKind,
    pub config: FoundationConfig,
    pub params: ParamStore<T>,
    vocab: TextVocab,
}

const MAX_LOGIT_SCALE: f64 = 4.605170185988092; // ln 100

impl<T: Float> FoundationEncoder<T> {
    pub fn new<R: Rng + ?Sized>(kind: EncoderKind, config: FoundationConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vocab = TextVocab::grammar();
        let mut p = ParamStore::new();
        let (d, depth, shape) = (config.dim, config.depth, config.block());
        let n = config.patches() + usize::from(kind == EncoderKind::CrossModal);
        let pl = config.patch_len();
        init_linear(&mut p, "img.embed", pl, d, (1.0 / pl as f64).sqrt(), rng);
        p.insert("img.pos", Tensor::randn(&[n, d], INIT_STD, rng));
        for i in 0..depth {
            init_block(&mut p, &format!("img.b{i}"), shape, depth, rng);
        }
        init_layer_norm(&mut p, "img.ln_f", d);
        match kind {
            EncoderKind::CrossModal => {
                init_linear(&mut p, "img.proj", d, d, (1.0 / d as f64).sqrt(), rng);
                p.insert("txt.emb", Tensor::randn(&[vocab.len(), d], INIT_STD, rng));
                p.insert("txt.pos", Tensor::randn(&[config.max_text_len, d], INIT_STD, rng));
                for i in 0..depth {
                    init_block(&mut p, &format!("txt.b{i}"), shape, depth, rng);
                }
                init_layer_norm(&mut p, "txt.ln_f", d);
                init_linear(&mut p, "txt.proj", d, d, (1.0 / d as f64).sqrt(), rng);
                p.insert("logit_scale", Tensor::full(&[1], T::of((1.0f64 / 0.07).ln())));
            }
            EncoderKind::VisionOnly => {
                p.insert("img.mask", Tensor::randn(&[1, d], INIT_STD, rng));
                init_linear(&mut p, "rec.head", d, pl, (1.0 / d as f64).sqrt(), rng);
            }
        }
        Ok(FoundationEncoder { kind, config, params: p, vocab })
    }

    pub fn has_cls(&self) -> bool {
        self.kind == EncoderKind::CrossModal
    }

    /// Rows per image: patch count plus the CLS slot when present.
    pub fn rows_per_image(&self) -> usize {
        self.config.patches() + usize::from(self.has_cls())
    }

    /// Width of `agg(f_F)` under `mode`.
    pub fn global_dim(&self, mode: AggMode) -> usize {
        match mode {
            AggMode::Concat => 2 * self.config.dim,
            _ => self.config.dim,
        }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Flattened patches `[b * N, p * p * 3]` with a zero row in each CLS slot.
    fn patch_rows(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (side, c) = (self.config.image_side, self.config.patch);
        let g = side / c;
        let mut data = Vec::with_capacity(images.len() * self.rows_per_image() * self.config.patch_len());
        for im in images {
            if im.height != side || im.width != side {
                return Err(FoundationError::Shape(format!(
                    "encoder expects {side}x{side} images, got {}x{}",
                    im.height, im.width
                )));
            }
            if self.has_cls() {
                data.extend(std::iter::repeat_n(T::zero(), self.config.patch_len()));
            }
            for gy in 0..g {
                for gx in 0..g {
                    for y in 0..c {
                        let start = ((gy * c + y) * side + gx * c) * 3;
                        data.extend(im.data[start..start + c * 3].iter().map(|&v| T::of(v as f64)));
                    }
                }
            }
        }
        Ok(Tensor::new(&[images.len() * self.rows_per_image(), self.config.patch_len()], data)?)
    }

    /// Final-layer hidden states `[b * N, D]`; `masked` marks rows replaced by the mask token.
    fn image_tower(&self, g: &mut Graph<T>, p: &ParamVars, rows: Tensor<T>, masked: Option<&[bool]>, b: usize) -> Result<Var> {
        let n = self.rows_per_image();
        let x = g.constant(rows);
        let e = linear(g, p, "img.embed", x)?;
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = g.gather_rows(p.get("img.pos")?, &pos_idx)?;
        let mut h = g.add(e, pos)?;
        if let Some(m) = masked {
            let ind = Tensor::new(&[b * n, 1], m.iter().map(|&v| if v { T::one() } else { T::zero() }).collect())?;
            let ind = g.constant(ind);
            let tok = g.matmul(ind, p.get("img.mask")?)?;
            h = g.add(h, tok)?;
        }
        let mask = AttnMask { causal: false, key_pad: None };
        for i in 0..self.config.depth {
            h = block_forward(g, p, &format!("img.b{i}"), self.config.block(), h, b, n, mask)?;
        }
        Ok(layer_norm(g, p, "img.ln_f", h)?)
    }

    /// Patch features of a batch, `[b * N, D]`.
    fn features_graph(&self, g: &mut Graph<T>, p: &ParamVars, images: &[&Image]) -> Result<Var> {
        let rows = self.patch_rows(images)?;
        let h = self.image_tower(g, p, rows, None, images.len())?;
        match self.kind {
            EncoderKind::CrossModal => Ok(linear(g, p, "img.proj", h)?),
            EncoderKind::VisionOnly => Ok(h),
        }
    }

    /// `f_F = E_F(I)` for each image.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<PatchFeatures<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let f = self.features_graph(&mut g, &p, images)?;
        let n = self.rows_per_image();
        let d = self.config.dim;
        let data = g.value(f).data();
        images
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let rows = Tensor::new(&[n, d], data[i * n * d..(i + 1) * n * d].to_vec())?;
                Ok(PatchFeatures { rows, has_cls: self.has_cls() })
            })
            .collect()
    }

    pub fn encode_image_patches(&self, image: &Image) -> Result<PatchFeatures<T>> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// `f_GF = agg(E_F(I))` for each image.
    pub fn global_batch(&self, images: &[&Image], mode: AggMode) -> Result<Vec<Vec<T>>> {
        self.encode_batch(images)?.iter().map(|f| aggregate(f, mode)).collect()
    }

    fn require_text(&self) -> Result<()> {
        match self.kind {
            EncoderKind::CrossModal => Ok(()),
            EncoderKind::VisionOnly => Err(FoundationError::Config("vision-only encoder has no text tower".into())),
        }
    }

    /// Text embeddings `[b, D]` (unnormalized) taken at each caption's last token.
    fn text_tower(&self, g: &mut Graph<T>, p: &ParamVars, captions: &[&str]) -> Result<Var> {
        let l = self.config.max_text_len;
        let b = captions.len();
        let mut ids = Vec::with_capacity(b * l);
        let mut pad = Vec::with_capacity(b * l);
        let mut last = Vec::with_capacity(b);
        for (i, c) in captions.iter().enumerate() {
            let enc = self.vocab.encode(c)?;
            last.push(i * l + enc.len() - 1);
            let (padded, m) = pad_to(enc, l)?;
            ids.extend(padded.into_iter().map(|x| x as usize));
            pad.extend(m);
        }
        let e = g.gather_rows(p.get("txt.emb")?, &ids)?;
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.gather_rows(p.get("txt.pos")?, &pos_idx)?;
        let mut h = g.add(e, pos)?;
        let mask = AttnMask { causal: true, key_pad: Some(&pad) };
        for i in 0..self.config.depth {
            h = block_forward(g, p, &format!("txt.b{i}"), self.config.block(), h, b, l, mask)?;
        }
        let h = layer_norm(g, p, "txt.ln_f", h)?;
        let h = g.gather_rows(h, &last)?;
        Ok(linear(g, p, "txt.proj", h)?)
    }

    /// Unit text embedding of each caption.
    pub fn encode_text_batch(&self, captions: &[&str]) -> Result<Vec<Vec<T>>> {
        self.require_text()?;
        if captions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let t = self.text_tower(&mut g, &p, captions)?;
        let t = g.value(t);
        (0..captions.len()).map(|i| normalize(t.row(i))).collect()
    }

    pub fn encode_text_global(&self, caption: &str) -> Result<Vec<T>> {
        Ok(self.encode_text_batch(&[caption])?.remove(0))
    }

    /// Records the contrastive objective for a batch of image-caption pairs.
    pub fn contrastive_loss(&self, g: &mut Graph<T>, p: &ParamVars, images: &[&Image], captions: &[&str]) -> Result<Var> {
        self.require_text()?;
        if images.len() != captions.len() {
            return Err(FoundationError::Shape(format!("{} images but {} captions", images.len(), captions.len())));
        }
        let distinct = captions.iter().collect::<HashSet<_>>().len();
        if distinct < 2 {
            return Err(FoundationError::BatchTooSmall(distinct));
        }
        let f = self.features_graph(g, p, images)?;
        let n = self.rows_per_image();
        let cls_idx: Vec<usize> = (0..images.len()).map(|i| i * n).collect();
        let img = g.gather_rows(f, &cls_idx)?;
        let img = g.normalize_rows(img)?;
        let txt = self.text_tower(g, p, captions)?;
        let txt = g.normalize_rows(txt)?;
        let scale = g.exp(p.get("logit_scale")?);
        info_nce(g, img, txt, scale)
    }

    pub fn contrastive_train_step(&mut self, images: &[&Image], captions: &[&str], opt: &mut AdamW<T>) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.attach(&mut g);
        let loss = self.contrastive_loss(&mut g, &p, images, captions)?;
        let value = g.value(loss).item().as_f64();
        let grads = collect_grads(&g, &p, loss)?;
        opt.update(&mut self.params, &grads)?;
        let s = self.params.get_mut("logit_scale")?;
        let clamped = s.data()[0].as_f64().clamp(0.0, MAX_LOGIT_SCALE);
        s.data_mut()[0] = T::of(clamped);
        Ok(value)
    }

    /// Draws a patch mask with `round(mask_ratio * patches)` hidden patches per image.
    pub fn draw_mask<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<bool> {
        let n = self.config.patches();
        let k = (self.config.mask_ratio * n as f64).round() as usize;
        let mut out = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            let mut m = vec![false; n];
            for i in sample(rng, n, k) {
                m[i] = true;
            }
            out.extend(m);
        }
        out
    }

    /// Masked-patch reconstruction MSE. With nothing masked this is plain autoencoding over all patches.
    pub fn recon_loss(&self, g: &mut Graph<T>, p: &ParamVars, images: &[&Image], masked: &[bool]) -> Result<Var> {
        if self.kind != EncoderKind::VisionOnly {
            return Err(FoundationError::Config("reconstruction training needs the vision-only encoder".into()));
        }
        let target = self.patch_rows(images)?;
        if masked.len() != target.rows() {
            return Err(FoundationError::Shape(format!("mask has {} entries for {} patches", masked.len(), target.rows())));
        }
        let pl = self.config.patch_len();
        let mut input = target.clone();
        for (r, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
            input.data_mut()[r * pl..(r + 1) * pl].iter_mut().for_each(|v| *v = T::zero());
        }
        let h = self.image_tower(g, p, input, Some(masked), images.len())?;
        let out = linear(g, p, "rec.head", h)?;
        let tv = g.constant(target);
        let diff = g.sub(out, tv)?;
        let sq = g.mul(diff, diff)?;
        let ones = g.constant(Tensor::full(&[pl, 1], T::of(1.0 / pl as f64)));
        let per_patch = g.matmul(sq, ones)?;
        let any = masked.iter().any(|&m| m);
        let w: Vec<T> = masked.iter().map(|&m| if m || !any { T::one() } else { T::zero() }).collect();
        Ok(g.weighted_mean(per_patch, &w)?)
    }

    pub fn recon_train_step<R: Rng + ?Sized>(&mut self, images: &[&Image], opt: &mut AdamW<T>, rng: &mut R) -> Result<f64> {
        let masked = self.draw_mask(images.len(), rng);
        let mut g = Graph::new();
        let p = self.params.attach(&mut g);
        let loss = self.recon_loss(&mut g, &p, images, &masked)?;
        let value = g.value(loss).item().as_f64();
        let grads = collect_grads(&g, &p, loss)?;
        opt.update(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Top-1 image-to-caption retrieval accuracy over aligned lists.
    pub fn retrieval_accuracy(&self, images: &[&Image], captions: &[&str]) -> Result<f64> {
        let img = self.global_batch(images, AggMode::Cls)?;
        let txt = self.encode_text_batch(captions)?;
        let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum::<f64>();
        let mut hits = 0;
        for (i, v) in img.iter().enumerate() {
            let best = (0..txt.len())
                .map(|j| (j, dot(v, &txt[j])))
                .fold((0, f64::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
            hits += usize::from(best.0 == i);
        }
        Ok(hits as f64 / images.len().max(1) as f64)
    }

    pub fn to_container(&self) -> Container<T> {
        let meta = serde_json::json!({ "kind": "foundation", "encoder": self.kind, "config": self.config });
        let mut c = Container::new(meta);
        for (n, t) in self.params.iter() {
            c.push(n, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("foundation") {
            return Err(FoundationError::Checkpoint("not a foundation encoder checkpoint".into()));
        }
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| FoundationError::Checkpoint(format!("missing `{k}`")));
        let kind: EncoderKind =
            serde_json::from_value(field("encoder")?).map_err(|e| FoundationError::Checkpoint(e.to_string()))?;
        let config: FoundationConfig =
            serde_json::from_value(field("config")?).map_err(|e| FoundationError::Checkpoint(e.to_string()))?;
        config.validate()?;
        let params: ParamStore<T> = c.entries.iter().cloned().collect();
        let want = Self::new(kind, config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in want.params.iter() {
            let got = params.get(name).map_err(|_| FoundationError::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(FoundationError::Checkpoint(format!("tensor `{name}` has shape {:?}", got.shape())));
            }
        }
        Ok(FoundationEncoder { kind, config, params, vocab: TextVocab::grammar() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
