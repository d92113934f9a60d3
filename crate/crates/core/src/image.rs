//! RGB float images and PNG input/output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{Float, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("failed to decode PNG {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("failed to write PNG {path}: {msg}")]
    Write { path: String, msg: String },
    #[error("image shape mismatch: expected {expected:?}, found {found:?}")]
    Shape { expected: Vec<usize>, found: Vec<usize> },
}

/// `height x width x 3` image with channel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(&[self.height, self.width, 3], self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("image dims")
    }

    /// Builds an image from `[h, w, 3]` values, clamped to `[0, 1]`.
    pub fn from_values<T: Float>(height: usize, width: usize, values: &[T]) -> Result<Self, ImageError> {
        if values.len() != height * width * 3 {
            return Err(ImageError::Shape { expected: vec![height, width, 3], found: vec![values.len()] });
        }
        let data = values.iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        Ok(Image { height, width, data })
    }

    /// Center-crops to a square, then resizes to `side x side` by nearest neighbour.
    pub fn center_crop_resize(&self, side: usize) -> Image {
        let s = self.height.min(self.width);
        let oy = (self.height - s) / 2;
        let ox = (self.width - s) / 2;
        let mut out = Image::filled(side, side, [0.0; 3]);
        for y in 0..side {
            let sy = oy + (y * s) / side;
            for x in 0..side {
                let sx = ox + (x * s) / side;
                out.set_pixel(y, x, self.pixel(sy, sx));
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Image, ImageError> {
        let p = path.display().to_string();
        let file = File::open(path).map_err(|source| ImageError::Read { path: p.clone(), source })?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| ImageError::Decode { path: p.clone(), msg: e.to_string() })?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| ImageError::Decode { path: p.clone(), msg: "image too large".into() })?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Decode { path: p.clone(), msg: e.to_string() })?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(ImageError::Decode { path: p, msg: "unexpanded palette image".into() });
            }
        };
        let mut data = Vec::with_capacity(w * h * 3);
        for px in buf[..info.buffer_size()].chunks_exact(channels) {
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            data.extend(rgb.iter().map(|&c| c as f32 / 255.0));
        }
        Ok(Image { height: h, width: w, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let p = path.display().to_string();
        let err = |msg: String| ImageError::Write { path: p.clone(), msg };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        let file = File::create(path).map_err(|e| err(e.to_string()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| err(e.to_string()))?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_image_data(&bytes).map_err(|e| err(e.to_string()))?;
        Ok(())
    }
}

/// Stacks equally sized images into a `[batch, h, w, 3]` tensor.
pub fn batch_tensor<T: Float>(images: &[&Image]) -> Result<Tensor<T>, ImageError> {
    let first = images.first().ok_or(ImageError::Shape { expected: vec![1], found: vec![0] })?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(ImageError::Shape { expected: vec![h, w, 3], found: vec![im.height, im.width, 3] });
        }
        data.extend(im.data.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), h, w, 3], data).expect("batch dims"))
}
