use aralign::armodel::ArError;
use aralign::corpus::{CorpusError, IngestError};
use aralign::foundation::FoundationError;
use aralign::image::ImageError;
use aralign::metrics::MetricError;
use aralign::numerics::NumericsError;
use aralign::sampler::SampleError;
use aralign::tokenizers::TokenizerError;
use aralign::trainer::TrainError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {artifact}; run `aralign {producer}` first")]
    Dependency { artifact: String, producer: &'static str },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn other(e: impl std::fmt::Display) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv error: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Align(_) | TrainError::Corpus(_) => CliError::Config(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Config(_) => CliError::Config(e.to_string()),
            SampleError::Degenerate(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonFinite(_) | MetricError::NegativeEigenvalue(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

macro_rules! other_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Other(e.to_string())
            }
        }
    )*};
}

other_errors!(ArError, IngestError, FoundationError, ImageError, NumericsError, TokenizerError);

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Config(e.to_string())
    }
}
