use std::path::{Path, PathBuf};

use aralign::armodel::{ArModel, ModeTag};
use aralign::corpus::{caption, generate_scene, load_pairs, render, CorpusConfig, ManifestRecord, Sample, SceneSpec, Template, MANIFEST_NAME};
use aralign::foundation::{AggMode, EncoderKind, FoundationEncoder};
use aralign::image::Image;
use aralign::metrics::{attribute_accuracy, clip_score, frechet_distance, ms_ssim, AttributeScores, FeatureSet, MetricReport};
use aralign::numerics::{AdamW, Container, RngStreams};
use aralign::sampler::{generate_image, SampleConfig, Sampler};
use aralign::tokenizers::{TextVocab, Vocabulary, VqTokenizer};
use aralign::trainer::{code_version, pretrain_text_lm, RunManifest, StepRecord, TokenizedSet, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::workspace::{read_json, source_train_config, write_json, Keys, Kind, Workspace};

/// Pretraining batches for the tokenizer and encoders come from corpus seeds
/// starting here, away from the training and held-out sets.
pub const PRETRAIN_SEED_BASE: u64 = 10_000_000;

pub const TOKENIZER_FILE: &str = "tokenizer.artc";
pub const VOCAB_FILE: &str = "vocab.json";
pub const ENCODER_FILE: &str = "encoder.artc";
pub const LM_FILE: &str = "lm.artc";
pub const SOURCE_FILE: &str = "source.artc";
pub const CHECKPOINT_FILE: &str = "checkpoint.artc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const EVAL_FILE: &str = "eval.json";
const STATE_FILE: &str = "state.json";

#[derive(Clone, Copy, Debug)]
pub struct Options {
    /// Zeroes wall-clock fields so logs of identical runs compare byte for byte.
    pub deterministic: bool,
    pub quiet: bool,
    pub checkpoint_every: u64,
    /// Stops `train` after the checkpoint at this step, as an interruption would.
    pub halt_at: Option<u64>,
}

impl Default for Options {
    fn default() -> Self {
        Options { deterministic: false, quiet: false, checkpoint_every: 500, halt_at: None }
    }
}

impl Options {
    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn pretrain_batch(corpus: &CorpusConfig, step: u64, batch: usize) -> Result<Vec<Sample>> {
    let b = batch as u64;
    (0..b).map(|i| Ok(generate_scene(PRETRAIN_SEED_BASE + step * b + i, corpus)?)).collect()
}

fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:06}.png");
        s.image.save_png(&dir.join(&file))?;
        let rec = ManifestRecord { file, caption: s.caption.clone(), category_id: s.category_id };
        lines.push_str(&serde_json::to_string(&rec).map_err(CliError::other)?);
        lines.push('\n');
    }
    std::fs::write(dir.join(MANIFEST_NAME), lines)?;
    Ok(())
}

pub fn load_split(dir: &Path, canvas: usize) -> Result<Vec<Sample>> {
    load_pairs(dir, canvas)?.map(|s| s.map_err(CliError::from)).collect()
}

/// Renders the training and held-out splits as PNG + manifest directories.
pub fn gen_data(ws: &Workspace, c: &PipelineConfig, o: &Options) -> Result<PathBuf> {
    let key = Keys::new(c).data;
    if ws.is_complete(Kind::Data, &key) {
        o.note(format!("data {key} already present"));
        return Ok(ws.dir(Kind::Data, &key));
    }
    let dir = ws.prepare(Kind::Data, &key, false)?;
    let t = &c.train;
    t.corpus.validate()?;
    let train = t.data.train_samples(&t.corpus)?;
    let heldout = t.data.heldout_samples(&t.corpus)?;
    write_split(&dir.join("train"), &train)?;
    write_split(&dir.join("heldout"), &heldout)?;
    ws.mark_complete(Kind::Data, &key, json!({ "corpus": t.corpus, "data": t.data }))?;
    o.note(format!("data {key}: {} train, {} held-out pairs", train.len(), heldout.len()));
    Ok(dir)
}

pub fn train_tokenizer(ws: &Workspace, c: &PipelineConfig, o: &Options) -> Result<PathBuf> {
    let key = Keys::new(c).tokenizer;
    if ws.is_complete(Kind::Tokenizer, &key) {
        o.note(format!("tokenizer {key} already present"));
        return Ok(ws.dir(Kind::Tokenizer, &key));
    }
    let dir = ws.prepare(Kind::Tokenizer, &key, false)?;
    let s = &c.tokenizer;
    let streams = RngStreams::new(s.seed);
    let mut tok = VqTokenizer::<f32>::new(s.vq, &mut streams.stream("init.tokenizer"))?;
    let mut opt = AdamW::new(s.optimizer);
    let mut rng = streams.stream("tokenizer.train");
    let mut log = String::new();
    for step in 0..s.steps {
        let batch = pretrain_batch(&c.train.corpus, step, s.batch_size)?;
        let imgs: Vec<&Image> = batch.iter().map(|b| &b.image).collect();
        let l = tok.train_step(&imgs, &mut opt, &mut rng)?;
        if !l.recon_loss.is_finite() {
            return Err(CliError::Numerical(format!("tokenizer loss is not finite at step {step}")));
        }
        if (step + 1) % 100 == 0 || step + 1 == s.steps {
            log.push_str(&format!("{}\n", json!({ "step": step, "losses": l })));
            o.note(format!("tokenizer step {}/{}: recon {:.5}", step + 1, s.steps, l.recon_loss));
        }
    }
    let heldout = c.train.data.heldout_samples(&c.train.corpus)?;
    let probe = &heldout[..heldout.len().min(64)];
    let mut mse = 0.0;
    for h in probe {
        let r = tok.reconstruct(&h.image)?;
        mse += r.data.iter().zip(&h.image.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / r.data.len() as f64;
    }
    let mse = mse / probe.len().max(1) as f64;
    tok.save(&dir.join(TOKENIZER_FILE))?;
    std::fs::write(dir.join(VOCAB_FILE), TextVocab::grammar().to_json())?;
    std::fs::write(dir.join("log.jsonl"), log)?;
    ws.mark_complete(Kind::Tokenizer, &key, json!({ "stage": s, "heldout_mse": mse }))?;
    o.note(format!("tokenizer {key}: held-out mse {mse:.5}"));
    Ok(dir)
}

pub fn train_encoder(ws: &Workspace, c: &PipelineConfig, kind: EncoderKind, o: &Options) -> Result<PathBuf> {
    let key = Keys::new(c).get(Kind::Encoder(kind)).to_string();
    if ws.is_complete(Kind::Encoder(kind), &key) {
        o.note(format!("{} {key} already present", Kind::Encoder(kind).dir_name()));
        return Ok(ws.dir(Kind::Encoder(kind), &key));
    }
    let dir = ws.prepare(Kind::Encoder(kind), &key, false)?;
    let s = &c.encoder;
    let streams = RngStreams::new(s.seed);
    let mut enc = FoundationEncoder::<f32>::new(kind, s.model, &mut streams.stream("init.encoder"))?;
    let mut opt = AdamW::new(s.optimizer);
    let mut mask_rng = streams.stream("encoder.mask");
    let mut log = String::new();
    let mut window = 0.0;
    for step in 0..s.steps {
        let batch = pretrain_batch(&c.train.corpus, step, s.batch_size)?;
        let imgs: Vec<&Image> = batch.iter().map(|b| &b.image).collect();
        let l = match kind {
            EncoderKind::CrossModal => {
                let caps: Vec<&str> = batch.iter().map(|b| b.caption.as_str()).collect();
                enc.contrastive_train_step(&imgs, &caps, &mut opt)?
            }
            EncoderKind::VisionOnly => enc.recon_train_step(&imgs, &mut opt, &mut mask_rng)?,
        };
        if !l.is_finite() {
            return Err(CliError::Numerical(format!("encoder loss is not finite at step {step}")));
        }
        window += l;
        if (step + 1) % 100 == 0 || step + 1 == s.steps {
            let n = (step % 100 + 1) as f64;
            log.push_str(&format!("{}\n", json!({ "step": step, "loss": window / n })));
            o.note(format!("{} step {}/{}: loss {:.4}", Kind::Encoder(kind).dir_name(), step + 1, s.steps, window / n));
            window = 0.0;
        }
    }
    let mut info = json!({ "stage": s, "kind": kind });
    if kind == EncoderKind::CrossModal {
        let specs = SceneSpec::all_single_object();
        let imgs = specs.iter().map(|sp| render(sp, c.train.corpus.canvas, c.train.corpus.palette)).collect::<std::result::Result<Vec<_>, _>>()?;
        let caps: Vec<String> = specs.iter().map(|sp| caption(sp, Template::At)).collect();
        let acc = enc.retrieval_accuracy(&imgs.iter().collect::<Vec<_>>(), &caps.iter().map(String::as_str).collect::<Vec<_>>())?;
        info["retrieval_accuracy"] = acc.into();
        o.note(format!("cross-modal encoder retrieval accuracy {acc:.3}"));
    }
    enc.save(&dir.join(ENCODER_FILE))?;
    std::fs::write(dir.join("log.jsonl"), log)?;
    ws.mark_complete(Kind::Encoder(kind), &key, info)?;
    Ok(dir)
}

fn load_tokenizer(ws: &Workspace, keys: &Keys) -> Result<(VqTokenizer<f32>, TextVocab)> {
    let dir = ws.require(Kind::Tokenizer, &keys.tokenizer)?;
    let tok = VqTokenizer::load(&dir.join(TOKENIZER_FILE))?;
    let vocab = TextVocab::from_json(&std::fs::read_to_string(dir.join(VOCAB_FILE))?)?;
    Ok((tok, vocab))
}

fn load_encoder(ws: &Workspace, keys: &Keys, kind: EncoderKind) -> Result<FoundationEncoder<f32>> {
    let dir = ws.require(Kind::Encoder(kind), keys.get(Kind::Encoder(kind)))?;
    Ok(FoundationEncoder::load(&dir.join(ENCODER_FILE))?)
}

/// Trains the caption-only language model that the `arra` regime starts from.
pub fn pretrain_lm(ws: &Workspace, c: &PipelineConfig, o: &Options) -> Result<PathBuf> {
    let keys = Keys::new(c);
    if ws.is_complete(Kind::Lm, &keys.lm) {
        o.note(format!("lm {} already present", keys.lm));
        return Ok(ws.dir(Kind::Lm, &keys.lm));
    }
    let data = ws.require(Kind::Data, &keys.data)?;
    let (tok, text) = load_tokenizer(ws, &keys)?;
    let dir = ws.prepare(Kind::Lm, &keys.lm, false)?;
    let canvas = c.train.corpus.canvas;
    let train = load_split(&data.join("train"), canvas)?;
    let max_len = c.train.max_text_len;
    let captions = train.iter().map(|s| Ok(text.encode_padded(&s.caption, max_len)?.0)).collect::<Result<Vec<_>>>()?;
    let (h, w) = tok.grid_size(canvas, canvas)?;
    let vocab = Vocabulary::new(&text, tok.config.codebook_size);
    let lm = c.lm_config();
    let mut log = String::new();
    let model = pretrain_text_lm(&lm, &captions, vocab, max_len, h * w, |step, l| {
        if (step + 1) % 100 == 0 || step + 1 == lm.steps {
            log.push_str(&format!("{}\n", json!({ "step": step, "l_ar": l })));
            o.note(format!("lm step {}/{}: loss {l:.4}", step + 1, lm.steps));
        }
    })?;
    model.save(&dir.join(LM_FILE), ModeTag::TextOnly)?;
    std::fs::write(dir.join("log.jsonl"), log)?;
    ws.mark_complete(Kind::Lm, &keys.lm, json!({ "lm": lm }))?;
    Ok(dir)
}

/// Trains the text-to-image model on the source palette for `arra_adapt`.
pub fn train_source(ws: &Workspace, c: &PipelineConfig, o: &Options) -> Result<PathBuf> {
    let keys = Keys::new(c);
    if ws.is_complete(Kind::Source, &keys.source) {
        o.note(format!("source model {} already present", keys.source));
        return Ok(ws.dir(Kind::Source, &keys.source));
    }
    let (tok, text) = load_tokenizer(ws, &keys)?;
    let dir = ws.prepare(Kind::Source, &keys.source, false)?;
    let tc = source_train_config(c);
    let samples = tc.data.train_samples(&tc.corpus)?;
    let set = TokenizedSet::build(&samples, &text, &tok, None, tc.max_text_len)?;
    let mut trainer = Trainer::new(&tc, &set, None)?.with_dump_dir(&dir);
    let mut log = String::new();
    trainer.run(|r| {
        if (r.step + 1) % 100 == 0 || r.step + 1 == tc.steps {
            log.push_str(&format!("{}\n", json!({ "step": r.step, "l_ar": r.l_ar })));
            o.note(format!("source step {}/{}: l_ar {:.4}", r.step + 1, tc.steps, r.l_ar));
        }
    })?;
    trainer.model.save(&dir.join(SOURCE_FILE), ModeTag::T2i)?;
    std::fs::write(dir.join("log.jsonl"), log)?;
    ws.mark_complete(Kind::Source, &keys.source, json!({ "train": tc }))?;
    Ok(dir)
}

/// Declared inputs of `train`, in the order their producers run.
pub fn train_dependencies(c: &PipelineConfig) -> Vec<Kind> {
    let t = c.train.resolved();
    let mut deps = vec![Kind::Data, Kind::Tokenizer];
    if let Some(k) = c.encoder_kind_for_training() {
        deps.push(Kind::Encoder(k));
    }
    match t.regime {
        aralign::trainer::Regime::Arra => deps.push(Kind::Lm),
        aralign::trainer::Regime::ArraAdapt => deps.push(Kind::Source),
        _ => {}
    }
    deps
}

pub fn eval_dependencies(c: &PipelineConfig) -> Vec<Kind> {
    let mut deps = train_dependencies(c);
    if !deps.contains(&Kind::Encoder(EncoderKind::CrossModal)) {
        deps.push(Kind::Encoder(EncoderKind::CrossModal));
    }
    deps.push(Kind::Run);
    deps
}

/// Produces `kind` for `c` if it is missing.
pub fn produce(ws: &Workspace, c: &PipelineConfig, kind: Kind, o: &Options) -> Result<PathBuf> {
    match kind {
        Kind::Data => gen_data(ws, c, o),
        Kind::Tokenizer => train_tokenizer(ws, c, o),
        Kind::Encoder(k) => train_encoder(ws, c, k, o),
        Kind::Lm => pretrain_lm(ws, c, o),
        Kind::Source => train_source(ws, c, o),
        Kind::Run => train(ws, c, o).map(|r| r.dir),
        Kind::Eval => eval(ws, c, o).map(|_| ws.dir(Kind::Eval, &Keys::new(c).eval)),
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RunState {
    records: Vec<StepRecord>,
    heldout_cos: Vec<(u64, f64)>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub key: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Trains one configuration, resuming from the run's last checkpoint if a
/// previous attempt was interrupted.
pub fn train(ws: &Workspace, c: &PipelineConfig, o: &Options) -> Result<RunOutcome> {
    c.validate()?;
    let keys = Keys::new(c);
    for kind in train_dependencies(c) {
        ws.require(kind, keys.get(kind))?;
    }
    let dir = ws.dir(Kind::Run, &keys.run);
    if ws.is_complete(Kind::Run, &keys.run) {
        o.note(format!("run {} already complete", keys.run));
        let manifest = read_json(&dir.join(RUN_MANIFEST))?;
        return Ok(RunOutcome { key: keys.run, dir, manifest });
    }
    let tc = c.train.resolved();
    let (tok, text) = load_tokenizer(ws, &keys)?;
    let data = ws.dir(Kind::Data, &keys.data);
    let canvas = tc.corpus.canvas;
    let encoder = c.encoder_kind_for_training().map(|k| load_encoder(ws, &keys, k)).transpose()?;
    let enc = encoder.as_ref().map(|e| (e, tc.alignment.aggregation));
    let train_set = TokenizedSet::build(&load_split(&data.join("train"), canvas)?, &text, &tok, enc, tc.max_text_len)?;
    let probe_set = match enc {
        Some(e) => {
            let held = load_split(&data.join("heldout"), canvas)?;
            let n = tc.probe_size.min(held.len());
            Some(TokenizedSet::build(&held[..n], &text, &tok, Some(e), tc.max_text_len)?)
        }
        None => None,
    };
    let init = match tc.regime {
        aralign::trainer::Regime::Arra => Some(Container::load(&ws.dir(Kind::Lm, &keys.lm).join(LM_FILE))?),
        aralign::trainer::Regime::ArraAdapt => Some(Container::load(&ws.dir(Kind::Source, &keys.source).join(SOURCE_FILE))?),
        _ => None,
    };

    std::fs::create_dir_all(&dir)?;
    let (ckpt, state_path) = (dir.join(CHECKPOINT_FILE), dir.join(STATE_FILE));
    let resumed = match (ckpt.is_file(), read_json::<RunState>(&state_path)) {
        (true, Ok(st)) => {
            let t = Trainer::resume(&tc, &train_set, &Container::load(&ckpt)?)?;
            (st.records.len() as u64 == t.step_count()).then_some((t, st))
        }
        _ => None,
    };
    let (trainer, mut st) = match resumed {
        Some((t, st)) => {
            o.note(format!("run {}: resuming at step {}", keys.run, t.step_count()));
            (t, st)
        }
        None => (Trainer::new(&tc, &train_set, init.as_ref())?, RunState::default()),
    };
    let mut trainer = trainer.with_dump_dir(&dir);
    let probe = |t: &Trainer| -> Result<Option<f64>> {
        match &probe_set {
            Some(p) => Ok(t.probe_cosine(p, tc.probe_size)?),
            None => Ok(None),
        }
    };
    if trainer.step_count() == 0 {
        st.heldout_cos.extend(probe(&trainer)?.map(|v| (0, v)));
    }
    let every = o.checkpoint_every.max(1);
    while trainer.step_count() < tc.steps {
        let mut r = trainer.train_step()?;
        if o.deterministic {
            r.wall_ms = 0.0;
        }
        let s = trainer.step_count();
        if s % 100 == 0 || s == tc.steps {
            let cos = r.mean_cos.map(|v| format!(" cos {v:.4}")).unwrap_or_default();
            o.note(format!("run {} step {s}/{}: l_ar {:.4}{cos}", keys.run, tc.steps, r.l_ar));
        }
        st.records.push(r);
        if s % every == 0 || s == tc.steps {
            st.heldout_cos.extend(probe(&trainer)?.map(|v| (s, v)));
            let tmp = ckpt.with_extension("tmp");
            trainer.save_checkpoint(&tmp)?;
            std::fs::rename(&tmp, &ckpt)?;
            write_json(&state_path, &st)?;
            if o.halt_at == Some(s) && s < tc.steps {
                return Err(CliError::Other(format!("run {} halted at step {s}", keys.run)));
            }
        }
    }
    if !ckpt.is_file() {
        trainer.save_checkpoint(&ckpt)?;
    }
    let mut log = String::new();
    for r in &st.records {
        log.push_str(&serde_json::to_string(r).map_err(CliError::other)?);
        log.push('\n');
    }
    std::fs::write(dir.join(METRICS_FILE), log)?;
    let manifest = RunManifest {
        config: trainer.config.clone(),
        fingerprint: trainer.config.fingerprint(),
        code_version: code_version(),
        records: st.records,
        heldout_cos: st.heldout_cos,
        checkpoint: Some(PathBuf::from(CHECKPOINT_FILE)),
    };
    write_json(&dir.join(RUN_MANIFEST), &manifest)?;
    let _ = std::fs::remove_file(&state_path);
    ws.mark_complete(Kind::Run, &keys.run, json!({ "fingerprint": manifest.fingerprint, "upstream": upstream(c, &keys) }))?;
    Ok(RunOutcome { key: keys.run, dir, manifest })
}

fn upstream(c: &PipelineConfig, keys: &Keys) -> serde_json::Value {
    train_dependencies(c).into_iter().map(|k| (k.dir_name().to_string(), json!(keys.get(k)))).collect()
}

fn load_run_model(ws: &Workspace, keys: &Keys) -> Result<(ArModel<f32>, TrainConfig)> {
    let dir = ws.require(Kind::Run, &keys.run)?;
    let c = Container::load(&dir.join(CHECKPOINT_FILE))?;
    let model = ArModel::read_tagged(&c, ModeTag::T2i)?;
    let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
    Ok((model, manifest.config))
}

/// Image, sidecar and token ids for one generated caption.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub caption: String,
    pub seed: u64,
    pub config: SampleConfig,
    pub run: String,
    pub tokens: Vec<u32>,
}

/// Generates one image per caption with seeds `sample.seed + i`.
pub fn sample(ws: &Workspace, c: &PipelineConfig, captions: &[String], out: &Path, o: &Options) -> Result<Vec<PathBuf>> {
    let keys = Keys::new(c);
    let (model, tc) = load_run_model(ws, &keys)?;
    let (tok, text) = load_tokenizer(ws, &keys)?;
    c.sample.validate(tok.config.codebook_size)?;
    let sampler = Sampler::new(&model, ModeTag::T2i, tc.alignment.mechanism)?;
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (i, cap) in captions.iter().enumerate() {
        let cfg = SampleConfig { seed: c.sample.seed + i as u64, ..c.sample };
        let g = generate_image(&sampler, &text, &tok, cap, tc.max_text_len, &cfg)?;
        let png = out.join(format!("sample_{i:03}.png"));
        g.image.save_png(&png)?;
        let rec = SampleRecord { caption: cap.clone(), seed: cfg.seed, config: cfg, run: keys.run.clone(), tokens: g.tokens };
        write_json(&png.with_extension("json"), &rec)?;
        o.note(format!("{}: {cap}", png.display()));
        files.push(png);
    }
    Ok(files)
}

/// One evaluated run, as written to `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    /// Fingerprint of the config with the seed zeroed; seeds of one config share it.
    pub group: String,
    pub seed: u64,
    pub run_key: String,
    /// Run directory relative to the directory holding this report.
    pub run_dir: PathBuf,
    pub config: TrainConfig,
    pub sample: SampleConfig,
    pub metrics: MetricReport,
    pub heldout_cos: Vec<(u64, f64)>,
    /// Attribute scores of tokenizer reconstructions of the ground truth, an upper reference.
    pub reconstruction_attributes: AttributeScores,
    pub samples: usize,
}

pub fn group_fingerprint(config: &TrainConfig) -> String {
    TrainConfig { seed: 0, ..config.resolved() }.fingerprint()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Generates images for held-out captions and scores them against the ground-truth renders.
pub fn eval(ws: &Workspace, c: &PipelineConfig, o: &Options) -> Result<EvalReport> {
    c.validate()?;
    let keys = Keys::new(c);
    for kind in eval_dependencies(c) {
        ws.require(kind, keys.get(kind))?;
    }
    let edir = ws.dir(Kind::Eval, &keys.eval);
    if ws.is_complete(Kind::Eval, &keys.eval) {
        return read_json(&edir.join(EVAL_FILE));
    }
    let (model, tc) = load_run_model(ws, &keys)?;
    let (tok, text) = load_tokenizer(ws, &keys)?;
    let enc = load_encoder(ws, &keys, EncoderKind::CrossModal)?;
    c.sample.validate(tok.config.codebook_size)?;
    let mechanism = tc.alignment.mechanism;
    let sampler = Sampler::new(&model, ModeTag::T2i, mechanism)?;
    let canvas = tc.corpus.canvas;
    let mut held = load_split(&ws.dir(Kind::Data, &keys.data).join("heldout"), canvas)?;
    held.truncate(c.eval.heldout);
    let mut generated = Vec::with_capacity(held.len());
    for (i, s) in held.iter().enumerate() {
        let cfg = SampleConfig { seed: c.sample.seed + i as u64, ..c.sample };
        generated.push(generate_image(&sampler, &text, &tok, &s.caption, tc.max_text_len, &cfg)?.image);
    }
    let gen: Vec<&Image> = generated.iter().collect();
    let truth: Vec<&Image> = held.iter().map(|s| &s.image).collect();
    let caps: Vec<&str> = held.iter().map(|s| s.caption.as_str()).collect();
    let features = |imgs: &[&Image], name: &str| -> Result<FeatureSet> {
        let rows = enc.global_batch(imgs, AggMode::Cls)?;
        Ok(FeatureSet::new(rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect(), name)?)
    };
    let fid = frechet_distance(&features(&gen, "generated")?, &features(&truth, "heldout")?)?;
    let clip = clip_score(&enc, &gen, &caps)?;
    let ssim = mean(gen.iter().zip(&truth).map(|(a, b)| ms_ssim(a, b)).collect::<std::result::Result<Vec<_>, _>>()?.into_iter());
    let palette = tc.corpus.palette;
    let attributes = attribute_accuracy(&gen, &caps, palette)?;
    let recon = truth.iter().map(|t| tok.reconstruct(t)).collect::<std::result::Result<Vec<_>, _>>()?;
    let reconstruction_attributes = attribute_accuracy(&recon.iter().collect::<Vec<_>>(), &caps, palette)?;
    let run_manifest: RunManifest = read_json(&ws.dir(Kind::Run, &keys.run).join(RUN_MANIFEST))?;
    let report = EvalReport {
        fingerprint: tc.fingerprint(),
        group: group_fingerprint(&tc),
        seed: tc.seed,
        run_key: keys.run.clone(),
        run_dir: Path::new("..").join("..").join(Kind::Run.dir_name()).join(&keys.run),
        config: tc.clone(),
        sample: c.sample,
        metrics: MetricReport {
            fid: Some(fid),
            clip_score: Some(clip),
            ms_ssim: Some(ssim),
            attributes: Some(attributes),
            config_fingerprint: tc.fingerprint(),
        },
        heldout_cos: run_manifest.heldout_cos,
        reconstruction_attributes,
        samples: held.len(),
    };
    ws.prepare(Kind::Eval, &keys.eval, false)?;
    write_json(&edir.join(EVAL_FILE), &report)?;
    ws.mark_complete(Kind::Eval, &keys.eval, json!({ "run": keys.run }))?;
    o.note(format!(
        "eval {}: fid {fid:.3} clip {clip:.3} ms-ssim {ssim:.3} exact {:.3} (reconstruction {:.3})",
        keys.eval, attributes.exact_match, reconstruction_attributes.exact_match
    ));
    Ok(report)
}
