use super::{CorpusError, Palette, SceneSpec, Shape};
use crate::image::Image;

pub const BACKGROUND: [f32; 3] = [0.1, 0.1, 0.1];

/// Pixel layout of the 3x3 grid on a square canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellGeometry {
    pub canvas: usize,
    pub cell: usize,
    pub origin: usize,
    pub inset: usize,
    pub shape_size: usize,
}

impl CellGeometry {
    pub fn new(canvas: usize) -> Self {
        let cell = canvas / 3;
        let inset = (cell / 10).max(1);
        CellGeometry { canvas, cell, origin: (canvas - 3 * cell) / 2, inset, shape_size: cell - 2 * inset }
    }

    /// Top-left pixel of the cell's `cell x cell` box.
    pub fn cell_origin(&self, row: u8, col: u8) -> (usize, usize) {
        (self.origin + row as usize * self.cell, self.origin + col as usize * self.cell)
    }

    /// Top-left pixel of the shape's `shape_size x shape_size` box.
    pub fn shape_origin(&self, row: u8, col: u8) -> (usize, usize) {
        let (y, x) = self.cell_origin(row, col);
        (y + self.inset, x + self.inset)
    }
}

/// Binary mask of `shape` on a `size x size` grid, row-major.
pub fn shape_mask(shape: Shape, size: usize) -> Vec<bool> {
    let s = size as f64;
    let half = s / 2.0;
    let arm = (size / 4).max(2) as f64 / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5 - half, y as f64 + 0.5 - half);
            let on = match shape {
                Shape::Square => true,
                Shape::Circle => cx * cx + cy * cy <= half * half,
                Shape::Triangle => cx.abs() <= (y as f64 + 1.0) / 2.0,
                Shape::Cross => cx.abs() <= arm || cy.abs() <= arm,
            };
            out.push(on);
        }
    }
    out
}

/// Renders `spec` without anti-aliasing on a uniform dark-gray background.
pub fn render(spec: &SceneSpec, canvas: usize, palette: Palette) -> Result<Image, CorpusError> {
    spec.validate_cells()?;
    let geo = CellGeometry::new(canvas);
    let mut img = Image::filled(canvas, canvas, BACKGROUND);
    for o in &spec.objects {
        let rgb = palette.rgb(o.color);
        let mask = shape_mask(o.shape, geo.shape_size);
        let (oy, ox) = geo.shape_origin(o.cell.row, o.cell.col);
        for y in 0..geo.shape_size {
            for x in 0..geo.shape_size {
                if mask[y * geo.shape_size + x] {
                    img.set_pixel(oy + y, ox + x, rgb);
                }
            }
        }
    }
    Ok(img)
}
