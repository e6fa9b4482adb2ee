//! RGB images in [0,1] with the handful of raster operations the pipeline
//! needs: PNG round-trips, grayscale conversion, half-resolution downscale
//! and lossless right-angle rotation.

use crate::error::{CbarfError, Result};
use std::path::Path;

/// Row-major interleaved RGB, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn same_dims(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Luma conversion with the documented 0.299/0.587/0.114 weights.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// 2x2 box-filter downscale by an integer factor (1 = no-op clone).
    pub fn downscale(&self, factor: usize) -> ImageRgb {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0);
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = ImageRgb::new(w, h);
        let inv = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(x * factor + dx, y * factor + dy);
                        acc[0] += p[0];
                        acc[1] += p[1];
                        acc[2] += p[2];
                    }
                }
                out.set_pixel(x, y, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
        }
        out
    }

    /// Lossless counter-clockwise rotation by `quarter_turns` * 90 degrees.
    pub fn rot90(&self, quarter_turns: u8) -> ImageRgb {
        let q = quarter_turns % 4;
        if q == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let (nw, nh) = if q % 2 == 0 { (w, h) } else { (h, w) };
        let mut out = ImageRgb::new(nw, nh);
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = match q {
                    1 => (y, w - 1 - x),
                    2 => (w - 1 - x, h - 1 - y),
                    _ => (h - 1 - y, x),
                };
                out.set_pixel(nx, ny, self.pixel(x, y));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]),
                );
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<ImageRgb> {
        let buf = image::open(path)?.to_rgb8();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let mut out = ImageRgb::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = buf.get_pixel(x as u32, y as u32);
                out.set_pixel(
                    x,
                    y,
                    [
                        f64::from(p[0]) / 255.0,
                        f64::from(p[1]) / 255.0,
                        f64::from(p[2]) / 255.0,
                    ],
                );
            }
        }
        Ok(out)
    }
}

/// Per-pixel boolean foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn downscale(&self, factor: usize) -> Mask {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0);
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                for dy in 0..factor {
                    for dx in 0..factor {
                        any |= self.data[(y * factor + dy) * self.width + x * factor + dx];
                    }
                }
                out.data[y * w + x] = any;
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = if self.data[y * self.width + x] { 255 } else { 0 };
                buf.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let buf = image::open(path)?.to_luma8();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let mut out = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = buf.get_pixel(x as u32, y as u32)[0] >= 128;
            }
        }
        Ok(out)
    }
}

/// Mean squared RGB error over two same-sized images.
pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(CbarfError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let n = a.data.len() as f64;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}
