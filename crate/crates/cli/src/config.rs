use std::path::Path;

use aralign::corpus::Palette;
use aralign::foundation::{EncoderKind, FoundationConfig};
use aralign::numerics::AdamWConfig;
use aralign::sampler::SampleConfig;
use aralign::tokenizers::VqConfig;
use aralign::trainer::{LmConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// VQ tokenizer pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerStage {
    pub vq: VqConfig,
    pub optimizer: AdamWConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TokenizerStage {
    fn default() -> Self {
        TokenizerStage {
            vq: VqConfig::default(),
            optimizer: AdamWConfig { lr: 2e-3, weight_decay: 0.0, ..AdamWConfig::default() },
            steps: 2000,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Foundation encoder pretraining; one config is shared by both kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderStage {
    pub model: FoundationConfig,
    pub optimizer: AdamWConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EncoderStage {
    fn default() -> Self {
        EncoderStage {
            model: FoundationConfig::default(),
            optimizer: AdamWConfig { lr: 1e-3, decay_steps: Some(3000), ..AdamWConfig::default() },
            steps: 3000,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// The text-to-image model that `arra_adapt` starts from, trained on another palette.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceStage {
    pub palette: Palette,
    pub steps: u64,
    pub seed: u64,
}

impl Default for SourceStage {
    fn default() -> Self {
        SourceStage { palette: Palette::Alternate, steps: 1000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalStage {
    /// Number of held-out captions generated for evaluation.
    pub heldout: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage { heldout: 200 }
    }
}

/// Every stage's settings. Missing fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub tokenizer: TokenizerStage,
    pub encoder: EncoderStage,
    pub lm: LmConfig,
    pub source: SourceStage,
    pub sample: SampleConfig,
    pub eval: EvalStage,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let c: PipelineConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.tokenizer.vq.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.encoder.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.encoder.model.image_side != self.train.corpus.canvas {
            return Err(CliError::Config(format!(
                "encoder image_side {} differs from corpus canvas {}",
                self.encoder.model.image_side, self.train.corpus.canvas
            )));
        }
        if self.train.data.heldout_size < self.eval.heldout {
            return Err(CliError::Config(format!(
                "eval wants {} held-out captions but data has {}",
                self.eval.heldout, self.train.data.heldout_size
            )));
        }
        for (name, steps, batch) in [
            ("tokenizer", self.tokenizer.steps, self.tokenizer.batch_size),
            ("encoder", self.encoder.steps, self.encoder.batch_size),
            ("lm", self.lm.steps, self.lm.batch_size),
        ] {
            if steps > 0 && batch == 0 {
                return Err(CliError::Config(format!("{name} batch_size must be positive")));
            }
        }
        let (h, w) = (self.sample.grid_h, self.sample.grid_w);
        let side = self.train.corpus.canvas / self.tokenizer.vq.patch;
        if (h, w) != (side, side) {
            return Err(CliError::Config(format!("sample grid {h}x{w} does not match the {side}x{side} token grid")));
        }
        Ok(())
    }

    /// The text model always shares the image model's shape.
    pub fn lm_config(&self) -> LmConfig {
        LmConfig { model: self.train.model, ..self.lm }
    }

    pub fn encoder_kind_for_training(&self) -> Option<EncoderKind> {
        match self.train.resolved().alignment.mechanism {
            aralign::alignment::Mechanism::None => None,
            _ => Some(self.train.alignment.encoder),
        }
    }
}
