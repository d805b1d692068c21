//! In-memory image and mask types shared by the dataset, metric, and
//! network modules.
//!
//! Pixels are `f64` channel values in `[0, 1]`, row-major, interleaved RGB.
//! Files on disk are lossless 8-bit PNG; a channel value `v` round-trips
//! as `round(v * 255)`, so anything loaded from disk survives a save
//! bit-exactly.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// An RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>, // len = width * height * 3, [y][x][c]
}

impl LinearImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Data(format!(
                "channel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    pub fn same_size(&self, other: &LinearImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flip_horizontal(&self) -> LinearImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img
            .pixels()
            .flat_map(|p| p.0.iter().map(|&v| v as f64 / 255.0))
            .collect();
        Self::from_pixels(w, h, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let rgb = self.get(x, y);
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([quantize(rgb[0]), quantize(rgb[1]), quantize(rgb[2])]),
                );
            }
        }
        img.save(path).map_err(Error::Image)
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A foreground mask; `true` marks foreground pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask buffer has {} bits, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn matches_image(&self, image: &LinearImage) -> bool {
        self.width == image.width() && self.height == image.height()
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Loads a grayscale PNG; values above 127 are foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bits = img.pixels().map(|p| p.0[0] > 127).collect();
        Self::new(w, h, bits)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = if self.get(x, y) { 255 } else { 0 };
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        img.save(path).map_err(Error::Image)
    }
}
