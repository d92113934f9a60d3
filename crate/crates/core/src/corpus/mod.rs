//! Synthetic shape-world corpus: scene specifications, a pixel-exact renderer,
//! template captions and a manifest-based ingestion path for external images.

mod caption;
mod ingest;
mod render;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use caption::{caption, parse_caption, ParseError, Template};
pub use ingest::{load_pairs, IngestError, ManifestRecord, PairStream, MANIFEST_NAME};
pub use render::{render, shape_mask, CellGeometry, BACKGROUND};

use crate::image::Image;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("objects overlap in cell ({row}, {col})")]
    OverlappingCells { row: u8, col: u8 },
    #[error("scene must hold 1 to 3 objects, found {0}")]
    ObjectCount(usize),
    #[error("cell ({row}, {col}) outside the 3x3 grid")]
    CellOutOfRange { row: u8, col: u8 },
    #[error("invalid corpus config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// RGB values assigned to the six color names.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    #[default]
    Standard,
    /// Shifted hues under the same names; used as the source domain for adaptation.
    Alternate,
}

impl Palette {
    pub fn rgb(self, c: Color) -> [f32; 3] {
        match (self, c) {
            (Palette::Standard, Color::Red) => [0.9, 0.1, 0.1],
            (Palette::Standard, Color::Green) => [0.1, 0.8, 0.2],
            (Palette::Standard, Color::Blue) => [0.15, 0.3, 0.95],
            (Palette::Standard, Color::Yellow) => [0.95, 0.9, 0.1],
            (Palette::Standard, Color::Magenta) => [0.9, 0.2, 0.85],
            (Palette::Standard, Color::Cyan) => [0.1, 0.85, 0.9],
            (Palette::Alternate, Color::Red) => [0.7, 0.25, 0.2],
            (Palette::Alternate, Color::Green) => [0.35, 0.65, 0.3],
            (Palette::Alternate, Color::Blue) => [0.3, 0.35, 0.75],
            (Palette::Alternate, Color::Yellow) => [0.8, 0.75, 0.35],
            (Palette::Alternate, Color::Magenta) => [0.7, 0.35, 0.65],
            (Palette::Alternate, Color::Cyan) => [0.3, 0.7, 0.7],
        }
    }
}

/// One of the nine grid cells; `row` and `col` are in `0..3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        Cell { row, col }
    }

    pub fn from_index(i: usize) -> Self {
        Cell { row: (i / 3) as u8, col: (i % 3) as u8 }
    }

    pub fn index(self) -> usize {
        self.row as usize * 3 + self.col as usize
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..9).map(Cell::from_index)
    }

    /// Two-word position name, e.g. `top left`.
    pub fn words(self) -> [&'static str; 2] {
        [["top", "middle", "bottom"][self.row as usize], ["left", "center", "right"][self.col as usize]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
}

/// Ground-truth description of a synthetic image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Canonical order: row-major by cell.
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Canonicalizes object order and checks the scene invariants.
    pub fn new(mut objects: Vec<SceneObject>) -> Result<Self, CorpusError> {
        objects.sort_by_key(|o| o.cell.index());
        let spec = SceneSpec { objects };
        spec.validate()?;
        Ok(spec)
    }

    pub fn empty() -> Self {
        SceneSpec { objects: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.objects.is_empty() || self.objects.len() > 3 {
            return Err(CorpusError::ObjectCount(self.objects.len()));
        }
        self.validate_cells()
    }

    pub(crate) fn validate_cells(&self) -> Result<(), CorpusError> {
        let mut seen = [false; 9];
        for o in &self.objects {
            if o.cell.row > 2 || o.cell.col > 2 {
                return Err(CorpusError::CellOutOfRange { row: o.cell.row, col: o.cell.col });
            }
            if std::mem::replace(&mut seen[o.cell.index()], true) {
                return Err(CorpusError::OverlappingCells { row: o.cell.row, col: o.cell.col });
            }
        }
        Ok(())
    }

    pub fn object_at(&self, cell: Cell) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    /// Every one-object scene: 4 shapes x 6 colors x 9 cells.
    pub fn all_single_object() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(216);
        for shape in Shape::ALL {
            for color in Color::ALL {
                for cell in Cell::all() {
                    out.push(SceneSpec { objects: vec![SceneObject { shape, color, cell }] });
                }
            }
        }
        out
    }
}

/// Category id of a `(shape, color)` pair; 24 classes in fixed order.
pub fn category_id(shape: Shape, color: Color) -> u32 {
    (shape.index() * Color::ALL.len() + color.index()) as u32
}

pub fn category_from_id(id: u32) -> Option<(Shape, Color)> {
    let id = id as usize;
    if id >= 24 {
        return None;
    }
    Some((Shape::ALL[id / 6], Color::ALL[id % 6]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub templates: Vec<Template>,
    pub palette: Palette,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            canvas: 32,
            min_objects: 1,
            max_objects: 2,
            templates: vec![Template::At, Template::InThe],
            palette: Palette::Standard,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_objects < 1 || self.max_objects > 3 || self.min_objects > self.max_objects {
            return Err(CorpusError::Config(format!(
                "object range {}..={} must lie within 1..=3",
                self.min_objects, self.max_objects
            )));
        }
        if self.templates.is_empty() {
            return Err(CorpusError::Config("at least one caption template is required".into()));
        }
        if self.canvas < 12 {
            return Err(CorpusError::Config(format!("canvas {} too small", self.canvas)));
        }
        Ok(())
    }

    /// Longest caption in words this config can produce.
    pub fn max_caption_words(&self) -> usize {
        let per = self.templates.iter().map(|t| t.words_per_object()).max().unwrap_or(0);
        self.max_objects * per + self.max_objects.saturating_sub(1)
    }
}

/// An image with its caption. Ingested samples carry no ground-truth spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub caption: String,
    pub spec: Option<SceneSpec>,
    pub category_id: Option<u32>,
}

/// Draws a random scene spec and template from `rng`.
pub fn random_scene<R: Rng + ?Sized>(config: &CorpusConfig, rng: &mut R) -> (SceneSpec, Template) {
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let cells = sample(rng, 9, n).into_vec();
    let objects = cells
        .into_iter()
        .map(|c| SceneObject {
            shape: Shape::ALL[rng.random_range(0..4)],
            color: Color::ALL[rng.random_range(0..6)],
            cell: Cell::from_index(c),
        })
        .collect();
    let template = config.templates[rng.random_range(0..config.templates.len())];
    (SceneSpec::new(objects).expect("sampled cells are distinct"), template)
}

/// Deterministic sample for `seed`.
pub fn generate_scene(seed: u64, config: &CorpusConfig) -> Result<Sample, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (spec, template) = random_scene(config, &mut rng);
    let image = render(&spec, config.canvas, config.palette)?;
    let first = spec.objects[0];
    Ok(Sample {
        image,
        caption: caption(&spec, template),
        category_id: Some(category_id(first.shape, first.color)),
        spec: Some(spec),
    })
}
