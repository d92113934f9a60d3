//! Training loop for the four regimes: condition dropout, the composite
//! objective, checkpoints with exact resumption and per-step metric records.

mod data;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use data::{DataConfig, TokenizedSet};

use crate::alignment::{
    composite_loss, gva_loss, mean_cosine, select_alignment_positions, AlignError, AlignmentConfig, Mechanism,
    ProjectionHead,
};
use crate::armodel::{
    ar_loss, build_sequence, build_text_sequence, loss_weights, z_loss, ArConfig, ArError, ArModel, ModeTag,
    TokenSequence,
};
use crate::corpus::{CorpusConfig, CorpusError};
use crate::foundation::FoundationError;
use crate::numerics::{collect_grads, AdamW, AdamWConfig, Container, Graph, NumericsError, ParamStore, RngStreams};
use crate::tokenizers::{pad_to, uncond_ids, TokenizerError, Vocabulary};

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("regime {regime} needs a {tag} checkpoint")]
    MissingCheckpoint { regime: Regime, tag: ModeTag },
    #[error("non-finite loss at step {step}; batch dumped to {dump}")]
    NonFinite { step: u64, dump: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ArError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] FoundationError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Random initialization.
    ArraBase,
    /// Starts from a text-only language model; image rows are fresh.
    Arra,
    /// Starts from a text-to-image model trained on another corpus palette.
    ArraAdapt,
    /// Random initialization without alignment.
    Baseline,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::ArraBase => "arra_base",
            Regime::Arra => "arra",
            Regime::ArraAdapt => "arra_adapt",
            Regime::Baseline => "baseline",
        })
    }
}

/// Transformer width and depth; the vocabulary and length come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { dim: 128, depth: 4, heads: 4, mlp_ratio: 4 }
    }
}

impl ModelShape {
    /// Room for the padded caption, `<BOI>`, an optional `<REP>` and the image.
    pub fn ar_config(&self, vocab: Vocabulary, max_text_len: usize, image_tokens: usize) -> ArConfig {
        ArConfig {
            vocab,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            max_len: max_text_len + image_tokens + 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub alignment: AlignmentConfig,
    pub optimizer: AdamWConfig,
    pub model: ModelShape,
    pub batch_size: usize,
    pub steps: u64,
    pub cond_dropout_p: f64,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub data: DataConfig,
    pub max_text_len: usize,
    /// Held-out scenes used for the alignment cosine probe.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::ArraBase,
            alignment: AlignmentConfig::default(),
            optimizer: AdamWConfig::default(),
            model: ModelShape::default(),
            batch_size: 32,
            steps: 2000,
            cond_dropout_p: 0.1,
            seed: 0,
            corpus: CorpusConfig::default(),
            data: DataConfig::default(),
            max_text_len: crate::tokenizers::DEFAULT_MAX_TEXT_LEN,
            probe_size: 64,
        }
    }
}

impl TrainConfig {
    /// Applies regime rules: a baseline never aligns.
    pub fn resolved(&self) -> TrainConfig {
        let mut c = self.clone();
        if c.regime == Regime::Baseline {
            c.alignment.mechanism = Mechanism::None;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(TrainError::Config(format!("cond_dropout_p must be in [0, 1), got {}", self.cond_dropout_p)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        self.corpus.validate()?;
        self.alignment.validate(self.model.depth)?;
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let v = serde_json::to_value(self.resolved()).unwrap_or_default();
        hex::encode(&Sha256::digest(v.to_string().as_bytes())[..8])
    }
}

/// One optimization step's numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_ar: f64,
    pub l_gva: Option<f64>,
    pub l_z: f64,
    pub mean_cos: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    /// The record with wall time cleared, for determinism comparisons.
    pub fn timeless(&self) -> StepRecord {
        StepRecord { wall_ms: 0.0, ..self.clone() }
    }
}

/// Everything a run leaves behind besides its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub fingerprint: String,
    pub code_version: String,
    pub records: Vec<StepRecord>,
    pub heldout_cos: Vec<(u64, f64)>,
    pub checkpoint: Option<PathBuf>,
}

pub fn code_version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("ARALIGN_SOURCE_HASH"))
}

/// Builds the starting model for `config.regime`.
///
/// `checkpoint` must be a `text_only` model for `arra` and a `t2i` model for
/// `arra_adapt`; the other regimes start from the `init.model` stream.
pub fn init_model(
    config: &TrainConfig,
    vocab: Vocabulary,
    image_tokens: usize,
    checkpoint: Option<&Container<f32>>,
) -> Result<ArModel<f32>> {
    let ar = config.model.ar_config(vocab, config.max_text_len, image_tokens);
    let streams = RngStreams::new(config.seed);
    let fresh = || ArModel::new(ar, &mut streams.stream("init.model"));
    let load = |tag: ModeTag| -> Result<ArModel<f32>> {
        let c = checkpoint.ok_or(TrainError::MissingCheckpoint { regime: config.regime, tag })?;
        let m = ArModel::read_tagged(c, tag)?;
        if m.config != ar {
            return Err(TrainError::Config(format!("checkpoint model {:?} does not match {:?}", m.config, ar)));
        }
        Ok(m)
    };
    match config.regime {
        Regime::ArraBase | Regime::Baseline => {
            if checkpoint.is_some() {
                return Err(TrainError::Config(format!("regime {} trains from scratch", config.regime)));
            }
            Ok(fresh()?)
        }
        Regime::Arra => {
            let mut m = load(ModeTag::TextOnly)?;
            reset_image_rows(&mut m, &fresh()?)?;
            Ok(m)
        }
        Regime::ArraAdapt => load(ModeTag::T2i),
    }
}

/// Copies the image-token embedding rows and output columns from `fresh`.
fn reset_image_rows(m: &mut ArModel<f32>, fresh: &ArModel<f32>) -> Result<()> {
    let range = m.config.vocab.image_range();
    let (v, d) = (m.config.vocab.len(), m.config.dim);
    let src = fresh.params.get("tok_emb")?.data().to_vec();
    let emb = m.params.get_mut("tok_emb")?.data_mut();
    for id in range.clone() {
        let r = id as usize * d..(id as usize + 1) * d;
        emb[r.clone()].copy_from_slice(&src[r]);
    }
    let src_w = fresh.params.get("head.w")?.data().to_vec();
    let w = m.params.get_mut("head.w")?.data_mut();
    for row in 0..d {
        for id in range.clone() {
            w[row * v + id as usize] = src_w[row * v + id as usize];
        }
    }
    let src_b = fresh.params.get("head.b")?.data().to_vec();
    let b = m.params.get_mut("head.b")?.data_mut();
    for id in range {
        b[id as usize] = src_b[id as usize];
    }
    Ok(())
}

/// Owns the model, projection head and optimizer of one run.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: ArModel<f32>,
    pub head: Option<ProjectionHead<f32>>,
    opt: AdamW<f32>,
    data: &'d TokenizedSet,
    streams: RngStreams,
    step: u64,
    epochs: HashMap<u64, Vec<usize>>,
    dump_dir: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: &TrainConfig, data: &'d TokenizedSet, checkpoint: Option<&Container<f32>>) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        check_data(&config, data)?;
        let model = init_model(&config, data.vocab, data.image_tokens(), checkpoint)?;
        Self::assemble(config, data, model)
    }

    fn assemble(config: TrainConfig, data: &'d TokenizedSet, model: ArModel<f32>) -> Result<Self> {
        let streams = RngStreams::new(config.seed);
        let head = match config.alignment.mechanism {
            Mechanism::None => None,
            _ => {
                let out = data.feature_dim().ok_or_else(|| TrainError::Config("alignment needs f_GF features".into()))?;
                let kind = config.alignment.projection;
                Some(ProjectionHead::new(kind, config.model.dim, out, &mut streams.stream("init.head"))?)
            }
        };
        let opt = AdamW::new(config.optimizer);
        Ok(Trainer { config, model, head, opt, data, streams, step: 0, epochs: HashMap::new(), dump_dir: None })
    }

    /// Where a failing batch is written on a non-finite loss.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn lambda(&self) -> f64 {
        self.config.alignment.effective_lambda()
    }

    /// Dataset indices of the batch at `step`. Epoch `e` visits the data in a
    /// permutation drawn from its own stream, so any step can be recomputed.
    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let (n, b) = (self.data.len() as u64, self.config.batch_size as u64);
        (step * b..(step + 1) * b)
            .map(|k| {
                let e = k / n;
                let perm = self.epochs.entry(e).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..n as usize).collect();
                    p.shuffle(&mut self.streams.stream(&format!("data.epoch{e}")));
                    p
                });
                perm[(k % n) as usize]
            })
            .collect()
    }

    fn dropped(&self, step: u64) -> Vec<bool> {
        let mut rng = self.streams.stream(&format!("dropout.{step}"));
        (0..self.config.batch_size).map(|_| rng.random::<f64>() < self.config.cond_dropout_p).collect()
    }

    fn sequence(&self, i: usize, drop: bool) -> Result<TokenSequence> {
        let text = if drop { pad_to(uncond_ids(), self.data.max_text_len)?.0 } else { self.data.text[i].clone() };
        let seq = build_sequence(&text, &self.data.image[i], self.config.alignment.mechanism, &self.data.vocab, self.data.image_tokens())?;
        Ok(seq)
    }

    /// The token sequences of the next batch, after condition dropout.
    pub fn peek_batch(&mut self) -> Result<Vec<TokenSequence>> {
        let idx = self.batch_indices(self.step);
        let drop = self.dropped(self.step);
        idx.iter().zip(&drop).map(|(&i, &d)| self.sequence(i, d)).collect()
    }

    /// One AdamW update on the model and projection head.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let t0 = Instant::now();
        let step = self.step;
        let idx = self.batch_indices(step);
        let drop = self.dropped(step);
        let seqs: Vec<TokenSequence> = idx.iter().zip(&drop).map(|(&i, &d)| self.sequence(i, d)).collect::<Result<_>>()?;
        let (batch, len) = (seqs.len(), seqs[0].len());
        let mut ids = Vec::with_capacity(batch * len);
        let mut pad = Vec::with_capacity(batch * len);
        let mut targets = Vec::with_capacity(batch * len);
        let mut weights = Vec::with_capacity(batch * len);
        for s in &seqs {
            ids.extend_from_slice(&s.ids);
            pad.extend(s.pad_mask());
            targets.extend_from_slice(&s.targets);
            weights.extend(loss_weights::<f32>(s, false));
        }

        let mut params = self.model.params.clone();
        if let Some(h) = &self.head {
            params.extend(h.params.clone());
        }
        let mut g = Graph::new();
        let p = params.attach(&mut g);
        let out = self.model.forward_graph(&mut g, &p, &ids, &pad, batch)?;
        let ar = ar_loss(&mut g, out.logits, &targets, &weights)?;
        let z = z_loss(&mut g, out.logits, &weights)?;
        let lambda = self.lambda();
        let gva = match (&self.head, lambda > 0.0) {
            (Some(head), true) => {
                let positions =
                    seqs.iter().map(|s| select_alignment_positions(s, self.config.alignment.mechanism)).collect::<std::result::Result<Vec<_>, _>>()?;
                let f: Vec<Vec<f32>> = idx.iter().map(|&i| self.data.f_gf[i].clone()).collect();
                let hidden = out.hidden[self.config.alignment.depth];
                Some(gva_loss(&mut g, &p, head, hidden, len, &positions, &f, self.config.alignment.objective)?)
            }
            _ => None,
        };
        let total = composite_loss(&mut g, ar, gva.map(|v| v.loss), z, lambda)?;
        let value = |v| g.value(v).item() as f64;
        let (l_ar, l_z, l_total) = (value(ar), value(z), value(total));
        let l_gva = gva.map(|v| value(v.loss));
        let mean_cos = gva.map(|v| mean_cosine(g.value(v.f_a), g.value(v.target)));
        if !l_total.is_finite() {
            let dump = self.dump(step, &idx, &drop, l_ar, l_gva, l_z)?;
            return Err(TrainError::NonFinite { step, dump });
        }
        let grads = collect_grads(&g, &p, total)?;
        let lr = self.opt.lr_at(self.opt.step_count());
        let grad_norm = self.opt.update(&mut params, &grads)?;
        self.split_params(params)?;
        self.step += 1;
        Ok(StepRecord { step, l_ar, l_gva, l_z, mean_cos, lr, grad_norm, wall_ms: t0.elapsed().as_secs_f64() * 1e3 })
    }

    fn split_params(&mut self, params: ParamStore<f32>) -> Result<()> {
        for (name, t) in params.iter() {
            match &mut self.head {
                Some(h) if h.params.contains(name) => *h.params.get_mut(name)? = t.clone(),
                _ => *self.model.params.get_mut(name)? = t.clone(),
            }
        }
        Ok(())
    }

    fn dump(&self, step: u64, idx: &[usize], drop: &[bool], l_ar: f64, l_gva: Option<f64>, l_z: f64) -> Result<String> {
        let body = serde_json::json!({
            "step": step,
            "indices": idx,
            "dropped": drop,
            "captions": idx.iter().map(|&i| &self.data.captions[i]).collect::<Vec<_>>(),
            "image_ids": idx.iter().map(|&i| &self.data.image[i]).collect::<Vec<_>>(),
            "l_ar": l_ar,
            "l_gva": l_gva,
            "l_z": l_z,
        });
        let dir = self.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("nonfinite_step{step}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&body).unwrap_or_default())?;
        Ok(path.display().to_string())
    }

    /// Runs until `config.steps`, handing every record to `on_record`.
    pub fn run(&mut self, mut on_record: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while self.step < self.config.steps {
            let r = self.train_step()?;
            on_record(&r);
            out.push(r);
        }
        Ok(out)
    }

    /// Mean cosine between projected hidden states and `f_GF` over the first
    /// `n` scenes of `set`, without condition dropout.
    pub fn probe_cosine(&self, set: &TokenizedSet, n: usize) -> Result<Option<f64>> {
        let Some(head) = &self.head else { return Ok(None) };
        let mech = self.config.alignment.mechanism;
        let n = n.min(set.len());
        let mut params = self.model.params.clone();
        params.extend(head.params.clone());
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in (0..n).collect::<Vec<_>>().chunks(self.config.batch_size) {
            let seqs: Vec<TokenSequence> = chunk
                .iter()
                .map(|&i| build_sequence(&set.text[i], &set.image[i], mech, &set.vocab, set.image_tokens()))
                .collect::<std::result::Result<_, _>>()?;
            let len = seqs[0].len();
            let ids: Vec<u32> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
            let pad: Vec<bool> = seqs.iter().flat_map(|s| s.pad_mask()).collect();
            let mut g = Graph::new();
            let p = params.attach_frozen(&mut g);
            let out = self.model.forward_graph(&mut g, &p, &ids, &pad, seqs.len())?;
            let positions = seqs.iter().map(|s| select_alignment_positions(s, mech)).collect::<std::result::Result<Vec<_>, _>>()?;
            let f: Vec<Vec<f32>> = chunk.iter().map(|&i| set.f_gf[i].clone()).collect();
            let v = gva_loss(&mut g, &p, head, out.hidden[self.config.alignment.depth], len, &positions, &f, self.config.alignment.objective)?;
            let rows = g.value(v.f_a).rows();
            total += mean_cosine(g.value(v.f_a), g.value(v.target)) * rows as f64;
            count += rows;
        }
        Ok((count > 0).then(|| total / count as f64))
    }

    /// Model, head, optimizer moments and step counter. The data order and
    /// dropout draws are pure functions of `(seed, step)`, so nothing else is needed to resume.
    pub fn to_container(&self) -> Container<f32> {
        let mut c = Container::new(serde_json::json!({
            "kind": "train_state",
            "config": self.config,
            "step": self.step,
        }));
        self.model.write_into(&mut c, ModeTag::T2i);
        if let Some(h) = &self.head {
            for (n, t) in h.params.iter() {
                c.push(format!("align/{n}"), t.clone());
            }
        }
        let opt_step = self.opt.export(&mut c, "opt/");
        c.meta["opt_step"] = opt_step.into();
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    /// Continues a run saved by [`Trainer::save_checkpoint`] under the same config.
    pub fn resume(config: &TrainConfig, data: &'d TokenizedSet, c: &Container<f32>) -> Result<Self> {
        let config = config.resolved();
        let saved: TrainConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| TrainError::Config(format!("checkpoint has no train config: {e}")))?;
        if saved != config {
            return Err(TrainError::Config("checkpoint was written under a different train config".into()));
        }
        let step = c.meta["step"].as_u64().ok_or_else(|| TrainError::Config("checkpoint has no step".into()))?;
        let opt_step = c.meta["opt_step"].as_u64().unwrap_or(step);
        config.validate()?;
        check_data(&config, data)?;
        let model = ArModel::read_tagged(c, ModeTag::T2i)?;
        let mut t = Self::assemble(config, data, model)?;
        if let Some(h) = &mut t.head {
            for (name, tensor) in h.params.iter_mut() {
                let saved = c.get(&format!("align/{name}")).ok_or_else(|| TrainError::Config(format!("checkpoint lacks align/{name}")))?;
                *tensor = saved.clone();
            }
        }
        t.opt = AdamW::restore(t.config.optimizer, opt_step, c, "opt/");
        t.step = step;
        Ok(t)
    }
}

fn check_data(config: &TrainConfig, data: &TokenizedSet) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if data.max_text_len != config.max_text_len {
        return Err(TrainError::Config(format!("data padded to {} but config says {}", data.max_text_len, config.max_text_len)));
    }
    if config.alignment.mechanism != Mechanism::None && data.f_gf.len() != data.len() {
        return Err(TrainError::Config("alignment needs one f_GF feature per training pair".into()));
    }
    Ok(())
}

/// Settings for caption-only language-model pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub model: ModelShape,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { model: ModelShape::default(), optimizer: AdamWConfig::default(), batch_size: 32, steps: 500, seed: 0 }
    }
}

/// Trains a `text_only` model on captions alone, with the same padded text
/// span as the image model so positions line up.
pub fn pretrain_text_lm(
    config: &LmConfig,
    captions: &[Vec<u32>],
    vocab: Vocabulary,
    max_text_len: usize,
    image_tokens: usize,
    mut on_step: impl FnMut(u64, f64),
) -> Result<ArModel<f32>> {
    if captions.is_empty() || config.batch_size == 0 {
        return Err(TrainError::Config("text pretraining needs captions and a positive batch".into()));
    }
    let ar = config.model.ar_config(vocab, max_text_len, image_tokens);
    let streams = RngStreams::new(config.seed);
    let mut model = ArModel::new(ar, &mut streams.stream("init.model"))?;
    let mut opt = AdamW::new(config.optimizer);
    let mut rng = streams.stream("data");
    for step in 0..config.steps {
        let mut ids = Vec::new();
        let mut pad = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..config.batch_size {
            let caption = &captions[rng.random_range(0..captions.len())];
            let unpadded: Vec<u32> = caption.iter().copied().take_while(|&t| t != crate::tokenizers::PAD).collect();
            let (text, _) = pad_to(unpadded, max_text_len)?;
            let s = build_text_sequence(&text)?;
            ids.extend_from_slice(&s.ids);
            pad.extend(s.pad_mask());
            targets.extend_from_slice(&s.targets);
            weights.extend(loss_weights::<f32>(&s, true));
        }
        let mut g = Graph::new();
        let p = model.params.attach(&mut g);
        let out = model.forward_graph(&mut g, &p, &ids, &pad, config.batch_size)?;
        let ar = ar_loss(&mut g, out.logits, &targets, &weights)?;
        let z = z_loss(&mut g, out.logits, &weights)?;
        let total = composite_loss(&mut g, ar, None, z, 0.0)?;
        let l = g.value(ar).item() as f64;
        if !l.is_finite() {
            return Err(TrainError::NonFinite { step, dump: String::from("(text pretraining)") });
        }
        let grads = collect_grads(&g, &p, total)?;
        opt.update(&mut model.params, &grads)?;
        on_step(step, l);
    }
    Ok(model)
}
