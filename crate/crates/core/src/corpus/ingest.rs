use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Sample;
use crate::image::{Image, ImageError};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line: `{"file": str, "caption": str, "category_id": int?}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<u32>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open manifest {path}: {source}")]
    Manifest { path: String, source: std::io::Error },
    #[error("manifest line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("manifest line {line}: {source}")]
    Image { line: usize, source: ImageError },
}

/// Single-consumer stream of samples read from a manifest directory.
pub struct PairStream {
    dir: PathBuf,
    canvas: usize,
    lines: Lines<BufReader<File>>,
    line: usize,
    failed: bool,
}

/// Opens `dir/manifest.jsonl`; images are center-cropped and resized to `canvas`.
pub fn load_pairs(dir: &Path, canvas: usize) -> Result<PairStream, IngestError> {
    let path = dir.join(MANIFEST_NAME);
    let file =
        File::open(&path).map_err(|source| IngestError::Manifest { path: path.display().to_string(), source })?;
    Ok(PairStream { dir: dir.to_path_buf(), canvas, lines: BufReader::new(file).lines(), line: 0, failed: false })
}

impl PairStream {
    fn read(&self, text: &str) -> Result<Sample, IngestError> {
        let line = self.line;
        let rec: ManifestRecord =
            serde_json::from_str(text).map_err(|e| IngestError::Line { line, msg: e.to_string() })?;
        let image = Image::load_png(&self.dir.join(&rec.file)).map_err(|source| IngestError::Image { line, source })?;
        Ok(Sample {
            image: image.center_crop_resize(self.canvas),
            caption: rec.caption,
            spec: None,
            category_id: rec.category_id,
        })
    }
}

impl Iterator for PairStream {
    type Item = Result<Sample, IngestError>;

    /// Yields samples in manifest order; stops after the first error.
    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let text = self.lines.next()?;
            self.line += 1;
            let result = match text {
                Err(e) => Err(IngestError::Line { line: self.line, msg: e.to_string() }),
                Ok(t) if t.trim().is_empty() => continue,
                Ok(t) => self.read(&t),
            };
            self.failed = result.is_err();
            return Some(result);
        }
    }
}
