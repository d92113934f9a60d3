use super::{MetricError, Result};
use crate::image::Image;

/// Scales used; the finest is the input resolution.
pub const MS_SSIM_SCALES: usize = 3;
const BASE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 7;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Single-channel plane.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &Image, c: usize) -> Self {
        Plane { h: img.height, w: img.width, v: img.data.iter().skip(c).step_by(3).map(|&x| x as f64).collect() }
    }

    fn downsample(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Mean luminance term and mean contrast-structure term over valid windows.
/// The window shrinks to the plane size on coarse scales.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let k = WINDOW.min(a.h).min(a.w);
    let g = gaussian(k);
    let (oh, ow) = (a.h - k + 1, a.w - k + 1);
    let (mut lum, mut cs) = (0.0, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let wgt = g[dy] * g[dx];
                    let i = (y + dy) * a.w + x + dx;
                    let (p, q) = (a.v[i], b.v[i]);
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * p * p;
                    sbb += wgt * q * q;
                    sab += wgt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            lum += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
            cs += (2.0 * cov + C2) / (va + vb + C2);
        }
    }
    let n = (oh * ow) as f64;
    (lum / n, cs / n)
}

fn ms_ssim_plane(mut a: Plane, mut b: Plane) -> f64 {
    let total: f64 = BASE_WEIGHTS[..MS_SSIM_SCALES].iter().sum();
    let mut out = 1.0;
    for (s, &w) in BASE_WEIGHTS[..MS_SSIM_SCALES].iter().enumerate() {
        let w = w / total;
        let (lum, cs) = ssim_terms(&a, &b);
        // negative correlation contributes nothing rather than a complex power
        let term = if s + 1 == MS_SSIM_SCALES { (lum * cs).max(0.0) } else { cs.max(0.0) };
        out *= term.powf(w);
        if s + 1 < MS_SSIM_SCALES {
            a = a.downsample();
            b = b.downsample();
        }
    }
    out
}

/// Three-scale MS-SSIM with data range 1, averaged over RGB channels.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricError::Shape(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    if a.height.min(a.width) < 16 {
        return Err(MetricError::Shape(format!("side {} below 16", a.height.min(a.width))));
    }
    Ok((0..3).map(|c| ms_ssim_plane(Plane::channel(a, c), Plane::channel(b, c))).sum::<f64>() / 3.0)
}
