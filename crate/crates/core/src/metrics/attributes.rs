use serde::{Deserialize, Serialize};

use super::{MetricError, Result};
use crate::corpus::{parse_caption, shape_mask, Cell, CellGeometry, Color, Palette, SceneObject, SceneSpec, Shape, BACKGROUND};
use crate::image::Image;

/// Cells whose best template correlation falls below this are reported empty.
pub const CONFIDENCE_THRESHOLD: f64 = 0.6;

fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Shape templates placed inside a cell box, as 0/1 vectors.
fn templates(geo: &CellGeometry) -> Vec<(Shape, Vec<f64>)> {
    let (c, s, inset) = (geo.cell, geo.shape_size, geo.inset);
    Shape::ALL
        .iter()
        .map(|&shape| {
            let m = shape_mask(shape, s);
            let mut t = vec![0.0; c * c];
            for y in 0..s {
                for x in 0..s {
                    if m[y * s + x] {
                        t[(y + inset) * c + x + inset] = 1.0;
                    }
                }
            }
            (shape, t)
        })
        .collect()
}

/// Reads a scene back off a square corpus image drawn with `palette`.
///
/// Each pixel is labeled with its nearest color among the background and the
/// palette. In every cell the non-background pixels form a mask that is
/// correlated against the shape templates; the object color is the palette
/// entry nearest to the mean foreground color.
pub fn detect_attributes(image: &Image, palette: Palette) -> SceneSpec {
    let geo = CellGeometry::new(image.height.min(image.width));
    let tpl = templates(&geo);
    let colors: Vec<[f32; 3]> = Color::ALL.iter().map(|&c| palette.rgb(c)).collect();
    let mut objects = Vec::new();
    for cell in Cell::all() {
        let (oy, ox) = geo.cell_origin(cell.row, cell.col);
        let mut mask = vec![0.0; geo.cell * geo.cell];
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for y in 0..geo.cell {
            for x in 0..geo.cell {
                let p = image.pixel(oy + y, ox + x);
                let bg = dist2(p, BACKGROUND);
                if colors.iter().any(|&c| dist2(p, c) < bg) {
                    mask[y * geo.cell + x] = 1.0;
                    for k in 0..3 {
                        sum[k] += p[k] as f64;
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let (shape, conf) = tpl
            .iter()
            .map(|(s, t)| (*s, pearson(&mask, t)))
            .fold((Shape::Square, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if conf < CONFIDENCE_THRESHOLD {
            continue;
        }
        let mean = sum.map(|v| (v / count as f64) as f32);
        let color = Color::ALL
            .iter()
            .copied()
            .min_by(|&a, &b| dist2(mean, palette.rgb(a)).total_cmp(&dist2(mean, palette.rgb(b))))
            .unwrap_or(Color::Red);
        objects.push(SceneObject { shape, color, cell });
    }
    SceneSpec { objects }
}

/// Fractions in `[0, 1]` comparing detected scenes with their captions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeScores {
    /// Captioned objects whose (shape, color) is detected anywhere in the image.
    pub object_recall: f64,
    /// Captioned objects whose cell holds a detected object.
    pub position_accuracy: f64,
    /// Captioned objects whose cell holds a detected object of the right color.
    pub color_accuracy: f64,
    /// Images whose detected scene equals the captioned scene.
    pub exact_match: f64,
}

pub fn attribute_accuracy(images: &[&Image], captions: &[&str], palette: Palette) -> Result<AttributeScores> {
    if images.len() != captions.len() {
        return Err(MetricError::Mismatch(format!("{} images but {} captions", images.len(), captions.len())));
    }
    if images.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let specs = captions.iter().map(|c| parse_caption(c)).collect::<std::result::Result<Vec<_>, _>>()?;
    let (mut objects, mut recall, mut pos, mut color, mut exact) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (img, want) in images.iter().zip(&specs) {
        let got = detect_attributes(img, palette);
        let mut unused: Vec<(Shape, Color)> = got.objects.iter().map(|o| (o.shape, o.color)).collect();
        for o in &want.objects {
            objects += 1;
            if let Some(i) = unused.iter().position(|&k| k == (o.shape, o.color)) {
                unused.swap_remove(i);
                recall += 1;
            }
            if let Some(d) = got.object_at(o.cell) {
                pos += 1;
                color += usize::from(d.color == o.color);
            }
        }
        exact += usize::from(got == *want);
    }
    let frac = |k: usize, n: usize| k as f64 / n.max(1) as f64;
    Ok(AttributeScores {
        object_recall: frac(recall, objects),
        position_accuracy: frac(pos, objects),
        color_accuracy: frac(color, objects),
        exact_match: frac(exact, images.len()),
    })
}
