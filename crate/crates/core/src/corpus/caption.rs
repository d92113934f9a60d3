use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Cell, Color, SceneObject, SceneSpec, Shape};

/// Caption templates; multi-object captions join object phrases with `and`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `a {color} {shape} at {row} {col}`
    At,
    /// `a {color} {shape} in the {row} {col}`
    InThe,
}

impl Template {
    pub fn words_per_object(self) -> usize {
        match self {
            Template::At => 6,
            Template::InThe => 7,
        }
    }

    fn connector(self) -> &'static [&'static str] {
        match self {
            Template::At => &["at"],
            Template::InThe => &["in", "the"],
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot parse caption at word {position} (`{found}`): expected {expected}")]
pub struct ParseError {
    /// Zero-based word index where parsing failed (equal to the word count at end of input).
    pub position: usize,
    pub found: String,
    pub expected: String,
}

pub fn caption(spec: &SceneSpec, template: Template) -> String {
    let phrases: Vec<String> = spec
        .objects
        .iter()
        .map(|o| {
            let [r, c] = o.cell.words();
            format!("a {} {} {} {} {}", o.color.word(), o.shape.word(), template.connector().join(" "), r, c)
        })
        .collect();
    phrases.join(" and ")
}

struct Cursor<'a> {
    words: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.pos).copied()
    }

    fn fail<T>(&self, expected: &str) -> Result<T, ParseError> {
        Err(ParseError {
            position: self.pos,
            found: self.peek().unwrap_or("<end>").to_string(),
            expected: expected.to_string(),
        })
    }

    fn expect(&mut self, word: &str) -> Result<(), ParseError> {
        if self.peek() == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&format!("`{word}`"))
        }
    }

    fn one_of<T: Copy>(&mut self, options: &[(&str, T)], what: &str) -> Result<T, ParseError> {
        match self.peek().and_then(|w| options.iter().find(|(o, _)| *o == w)) {
            Some((_, v)) => {
                self.pos += 1;
                Ok(*v)
            }
            None => self.fail(what),
        }
    }
}

/// Inverse of [`caption`] over the template grammar.
pub fn parse_caption(text: &str) -> Result<SceneSpec, ParseError> {
    let mut cur = Cursor { words: text.split_whitespace().collect(), pos: 0 };
    let colors: Vec<(&str, Color)> = Color::ALL.iter().map(|&c| (c.word(), c)).collect();
    let shapes: Vec<(&str, Shape)> = Shape::ALL.iter().map(|&s| (s.word(), s)).collect();
    let rows = [("top", 0u8), ("middle", 1), ("bottom", 2)];
    let cols = [("left", 0u8), ("center", 1), ("right", 2)];
    let mut objects = Vec::new();
    loop {
        cur.expect("a")?;
        let color = cur.one_of(&colors, "a color")?;
        let shape = cur.one_of(&shapes, "a shape")?;
        match cur.peek() {
            Some("at") => cur.pos += 1,
            Some("in") => {
                cur.pos += 1;
                cur.expect("the")?;
            }
            _ => return cur.fail("`at` or `in the`"),
        }
        let row = cur.one_of(&rows, "a row word")?;
        let col = cur.one_of(&cols, "a column word")?;
        objects.push(SceneObject { shape, color, cell: Cell::new(row, col) });
        match cur.peek() {
            None => break,
            Some("and") => cur.pos += 1,
            Some(_) => return cur.fail("`and` or end of caption"),
        }
    }
    let start = cur.pos;
    SceneSpec::new(objects).map_err(|e| ParseError { position: start, found: String::new(), expected: e.to_string() })
}
