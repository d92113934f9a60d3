//! Pipeline stages, ablation grids and reports behind the `aralign` binary.

pub mod ablate;
pub mod config;
pub mod error;
pub mod report;
pub mod stages;
pub mod workspace;

use std::path::PathBuf;

use aralign::foundation::EncoderKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::stages::Options;
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "aralign", version, about = "Text-to-image AR training with global visual alignment")]
pub struct Cli {
    /// Pipeline config JSON; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "workspace")]
    pub workspace: PathBuf,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Zero wall-clock fields in logs so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Grid cells run concurrently by `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallel: usize,
    /// Suppress progress notes on stderr
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncoderChoice {
    #[value(name = "cross_modal")]
    CrossModal,
    #[value(name = "vision_only")]
    VisionOnly,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the training and held-out splits.
    GenData,
    /// Train the VQ image tokenizer.
    TrainTokenizer,
    /// Train foundation encoders.
    TrainEncoder {
        #[arg(long, value_enum, default_value = "all")]
        kind: EncoderChoice,
    },
    /// Train the caption-only LM, or with --t2i-source the source-palette T2I model.
    PretrainLm {
        #[arg(long)]
        t2i_source: bool,
    },
    /// Train the configured regime.
    Train {
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
        /// Stop after the checkpoint at this step; a rerun resumes from it.
        #[arg(long)]
        halt_at: Option<u64>,
    },
    /// Generate images for captions.
    Sample {
        #[arg(long, required = true)]
        caption: Vec<String>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Generate for held-out captions and score the results.
    Eval,
    /// Run an ablation grid.
    Ablate {
        /// Grid JSON (see configs/ablation.json)
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize eval manifests under a directory (default: the workspace).
    Report {
        /// Directory scanned recursively for eval.json
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective pipeline config.
    ShowConfig,
}

impl Cli {
    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn options(&self) -> Options {
        Options { deterministic: self.deterministic, quiet: self.quiet, ..Options::default() }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let c = cli.pipeline()?;
    let ws = Workspace::new(&cli.workspace);
    let mut o = cli.options();
    match &cli.command {
        Command::GenData => {
            println!("{}", stages::gen_data(&ws, &c, &o)?.display());
        }
        Command::TrainTokenizer => {
            println!("{}", stages::train_tokenizer(&ws, &c, &o)?.display());
        }
        Command::TrainEncoder { kind } => {
            let kinds = match kind {
                EncoderChoice::CrossModal => vec![EncoderKind::CrossModal],
                EncoderChoice::VisionOnly => vec![EncoderKind::VisionOnly],
                EncoderChoice::All => vec![EncoderKind::CrossModal, EncoderKind::VisionOnly],
            };
            for k in kinds {
                println!("{}", stages::train_encoder(&ws, &c, k, &o)?.display());
            }
        }
        Command::PretrainLm { t2i_source } => {
            let dir = if *t2i_source { stages::train_source(&ws, &c, &o)? } else { stages::pretrain_lm(&ws, &c, &o)? };
            println!("{}", dir.display());
        }
        Command::Train { checkpoint_every, halt_at } => {
            o.checkpoint_every = *checkpoint_every;
            o.halt_at = *halt_at;
            let r = stages::train(&ws, &c, &o)?;
            println!("{}", r.dir.display());
        }
        Command::Sample { caption, out } => {
            for f in stages::sample(&ws, &c, caption, out, &o)? {
                println!("{}", f.display());
            }
        }
        Command::Eval => {
            let r = stages::eval(&ws, &c, &o)?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(CliError::other)?);
        }
        Command::Ablate { grid, out } => {
            let g = ablate::AblationGrid::load(grid)?;
            let outcome = ablate::ablate(&ws, &c, &g, out.as_deref(), cli.parallel, &o)?;
            println!("{}", outcome.out_dir.join("ablation.csv").display());
            if outcome.failed() > 0 {
                return Err(CliError::Other(format!("{} grid cells failed", outcome.failed())));
            }
        }
        Command::Report { dir, out } => {
            let dir = dir.clone().unwrap_or_else(|| ws.root.clone());
            let out = out.clone().unwrap_or_else(|| ws.root.join("report"));
            let s = report::report(&dir, &out)?;
            println!("{} groups; summary in {}", s.groups.len(), out.display());
        }
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&c).map_err(CliError::other)?);
        }
    }
    Ok(())
}
