//! Evaluation metrics: Fréchet feature distance, caption-image cosine score,
//! MS-SSIM and a rule-based attribute detector for the shape-world corpus.

mod attributes;
mod frechet;
mod ssim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attributes::{attribute_accuracy, detect_attributes, AttributeScores, CONFIDENCE_THRESHOLD};
pub use frechet::{frechet_distance, FeatureSet};
pub use ssim::{ms_ssim, MS_SSIM_SCALES};

use crate::corpus::ParseError;
use crate::foundation::{AggMode, FoundationEncoder, FoundationError};
use crate::image::Image;
use crate::numerics::Float;

type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix square root failed: eigenvalue {0:e}")]
    NegativeEigenvalue(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Caption(#[from] ParseError),
    #[error(transparent)]
    Encoder(#[from] FoundationError),
}

/// Mean cosine between each image's CLS embedding and its caption embedding.
pub fn clip_score<T: Float>(encoder: &FoundationEncoder<T>, images: &[&Image], captions: &[&str]) -> Result<f64> {
    if images.len() != captions.len() {
        return Err(MetricError::Mismatch(format!("{} images but {} captions", images.len(), captions.len())));
    }
    if images.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let img = encoder.global_batch(images, AggMode::Cls)?;
    let txt = encoder.encode_text_batch(captions)?;
    Ok(img.iter().zip(&txt).map(|(a, b)| cosine(a, b)).sum::<f64>() / images.len() as f64)
}

pub fn cosine<T: Float>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
}

/// One evaluation run's numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: Option<f64>,
    pub clip_score: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub attributes: Option<AttributeScores>,
    pub config_fingerprint: String,
}

#[cfg(test)]
mod tests;
