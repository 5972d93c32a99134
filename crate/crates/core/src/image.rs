//! Single-channel float rasters and image export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major single-channel image, `data[y * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("image", &[height, width], &[data.len()]));
        }
        Ok(Image2D { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image2D {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image2D { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Counter-clockwise quarter turn on the pixel lattice.
    pub fn rot90(&self) -> Image2D {
        let (h, w) = (self.height, self.width);
        Image2D::from_fn(w, h, |y, x| self.get(x, w - 1 - y))
    }

    /// Shifts content by `(dy, dx)` pixels, filling with zeros.
    pub fn translate(&self, dy: isize, dx: isize) -> Image2D {
        Image2D::from_fn(self.height, self.width, |y, x| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                0.0
            } else {
                self.get(sy as usize, sx as usize)
            }
        })
    }

    /// Nearest-neighbour integer upsampling.
    pub fn upsample(&self, factor: usize) -> Image2D {
        Image2D::from_fn(self.height * factor, self.width * factor, |y, x| {
            self.get(y / factor, x / factor)
        })
    }

    /// Area-average downsampling by an integer factor dividing both sides.
    pub fn downsample_area(&self, factor: usize) -> Result<Image2D> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(
                "downsample factor",
                format!("{factor} does not divide {}x{}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f64;
        Ok(Image2D::from_fn(h, w, |y, x| {
            let mut s = 0.0f64;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += self.get(y * factor + dy, x * factor + dx) as f64;
                }
            }
            (s * inv) as f32
        }))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image2D {
        Image2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Binary mask at `threshold` (strictly greater is foreground), as 0/1 values.
    pub fn binarize(&self, threshold: f32) -> Image2D {
        self.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Writes an 8-bit greyscale PNG, clamping values to `[0, 1]`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.width, self.height, &self.data)
    }

    /// Writes a binary PGM (P5), clamping values to `[0, 1]`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&v| to_u8(v)));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_gray_png(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = data.iter().map(|&v| to_u8(v)).collect();
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&bytes).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// Tiles images of equal size into one row-major grid with `columns` columns.
pub fn tile(images: &[Image2D], columns: usize) -> Result<Image2D> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("tile", "no images"));
    };
    let (h, w) = (first.height, first.width);
    if images.iter().any(|im| im.shape() != [h, w]) {
        return Err(Error::invalid("tile", "images differ in size"));
    }
    let columns = columns.max(1).min(images.len());
    let rows = images.len().div_ceil(columns);
    let mut out = Image2D::zeros(rows * h, columns * w);
    for (i, im) in images.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        for y in 0..h {
            for x in 0..w {
                out.set(r * h + y, c * w + x, im.get(y, x));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot90_four_times_is_identity() {
        let im = Image2D::from_fn(5, 7, |y, x| (y * 7 + x) as f32);
        let r = im.rot90();
        assert_eq!(r.shape(), [7, 5]);
        assert_eq!(r.rot90().rot90().rot90(), im);
    }

    #[test]
    fn area_downsample_preserves_mean() {
        let im = Image2D::from_fn(8, 8, |y, x| ((y * 3 + x * 5) % 7) as f32);
        let d = im.downsample_area(4).unwrap();
        assert_eq!(d.shape(), [2, 2]);
        assert!((d.mean() - im.mean()).abs() < 1e-6);
        assert!(im.downsample_area(3).is_err());
    }

    #[test]
    fn png_round_trip_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        Image2D::from_fn(4, 6, |y, x| (y + x) as f32 / 8.0).write_png(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
