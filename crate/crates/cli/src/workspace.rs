//! Flat-file artifact store. Every artifact lives in `<root>/<kind>/<key>/`
//! and counts as present once its `artifact.json` marker exists.

use std::path::{Path, PathBuf};

use aralign::foundation::EncoderKind;
use aralign::trainer::{code_version, Regime};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const MARKER: &str = "artifact.json";

/// 16 hex chars of sha256 over the canonical JSON of `parts`.
pub fn content_key(parts: &impl Serialize) -> String {
    let v = serde_json::to_value(parts).unwrap_or(Value::Null);
    hex::encode(&Sha256::digest(v.to_string().as_bytes())[..8])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Data,
    Tokenizer,
    Encoder(EncoderKind),
    Lm,
    Source,
    Run,
    Eval,
}

impl Kind {
    pub fn dir_name(self) -> &'static str {
        match self {
            Kind::Data => "data",
            Kind::Tokenizer => "tokenizer",
            Kind::Encoder(EncoderKind::CrossModal) => "encoder-cross_modal",
            Kind::Encoder(EncoderKind::VisionOnly) => "encoder-vision_only",
            Kind::Lm => "lm",
            Kind::Source => "source",
            Kind::Run => "run",
            Kind::Eval => "eval",
        }
    }

    /// The subcommand that produces this artifact.
    pub fn producer(self) -> &'static str {
        match self {
            Kind::Data => "gen-data",
            Kind::Tokenizer => "train-tokenizer",
            Kind::Encoder(EncoderKind::CrossModal) => "train-encoder --kind cross_modal",
            Kind::Encoder(EncoderKind::VisionOnly) => "train-encoder --kind vision_only",
            Kind::Lm => "pretrain-lm",
            Kind::Source => "pretrain-lm --t2i-source",
            Kind::Run => "train",
            Kind::Eval => "eval",
        }
    }
}

/// Content keys of every artifact a pipeline config touches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keys {
    pub data: String,
    pub tokenizer: String,
    pub cross_modal: String,
    pub vision_only: String,
    pub lm: String,
    pub source: String,
    pub run: String,
    pub eval: String,
}

impl Keys {
    pub fn new(c: &PipelineConfig) -> Keys {
        let code = code_version();
        let t = c.train.resolved();
        let data = content_key(&json!({ "code": code, "corpus": t.corpus, "data": t.data }));
        let tokenizer = content_key(&json!({ "code": code, "stage": c.tokenizer, "corpus": t.corpus }));
        let encoder = |k: EncoderKind| content_key(&json!({ "code": code, "stage": c.encoder, "kind": k, "corpus": t.corpus }));
        let (cross_modal, vision_only) = (encoder(EncoderKind::CrossModal), encoder(EncoderKind::VisionOnly));
        let lm = content_key(&json!({
            "code": code, "lm": c.lm_config(), "data": data, "tokenizer": tokenizer, "max_text_len": t.max_text_len,
        }));
        let source = content_key(&json!({ "code": code, "train": source_train_config(c), "tokenizer": tokenizer }));
        let mut upstream = json!({ "data": data, "tokenizer": tokenizer });
        if let Some(k) = c.encoder_kind_for_training() {
            upstream["encoder"] = encoder(k).into();
        }
        match t.regime {
            Regime::Arra => upstream["lm"] = lm.clone().into(),
            Regime::ArraAdapt => upstream["source"] = source.clone().into(),
            _ => {}
        }
        let run = content_key(&json!({ "code": code, "train": t.fingerprint(), "upstream": upstream }));
        let eval = content_key(&json!({
            "code": code, "run": run, "sample": c.sample, "eval": c.eval, "encoder": cross_modal,
        }));
        Keys { data, tokenizer, cross_modal, vision_only, lm, source, run, eval }
    }

    pub fn get(&self, kind: Kind) -> &str {
        match kind {
            Kind::Data => &self.data,
            Kind::Tokenizer => &self.tokenizer,
            Kind::Encoder(EncoderKind::CrossModal) => &self.cross_modal,
            Kind::Encoder(EncoderKind::VisionOnly) => &self.vision_only,
            Kind::Lm => &self.lm,
            Kind::Source => &self.source,
            Kind::Run => &self.run,
            Kind::Eval => &self.eval,
        }
    }
}

/// The baseline-style run that produces the `arra_adapt` starting model.
pub fn source_train_config(c: &PipelineConfig) -> aralign::trainer::TrainConfig {
    let mut t = c.train.clone();
    t.regime = Regime::Baseline;
    t.alignment = Default::default();
    t.steps = c.source.steps;
    t.seed = c.source.seed;
    t.corpus.palette = c.source.palette;
    t.resolved()
}

#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn dir(&self, kind: Kind, key: &str) -> PathBuf {
        self.root.join(kind.dir_name()).join(key)
    }

    pub fn is_complete(&self, kind: Kind, key: &str) -> bool {
        self.dir(kind, key).join(MARKER).is_file()
    }

    /// The artifact directory, or a dependency error naming its producer.
    pub fn require(&self, kind: Kind, key: &str) -> Result<PathBuf> {
        if self.is_complete(kind, key) {
            Ok(self.dir(kind, key))
        } else {
            Err(CliError::Dependency { artifact: format!("{} artifact {key}", kind.dir_name()), producer: kind.producer() })
        }
    }

    /// Creates the artifact directory, clearing a stale incomplete one unless `keep` is set.
    pub fn prepare(&self, kind: Kind, key: &str, keep: bool) -> Result<PathBuf> {
        let dir = self.dir(kind, key);
        if dir.exists() && !keep {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn mark_complete(&self, kind: Kind, key: &str, info: Value) -> Result<()> {
        let body = json!({ "kind": kind.dir_name(), "key": key, "code_version": code_version(), "info": info });
        write_json(&self.dir(kind, key).join(MARKER), &body)
    }
}

/// Writes pretty JSON through a temporary file so readers never see half a file.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value).map_err(CliError::other)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}
