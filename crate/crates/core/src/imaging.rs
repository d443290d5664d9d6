//! Float raster images and PNG codecs.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// RGB image with channel values in `[0, 1]`, stored row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dims("image buffer", width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at `i + 0.5`).
    pub fn sample(&self, fx: f64, fy: f64) -> [f32; 3] {
        let x = (fx - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (fy - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (x - x0 as f64) as f32;
        let ay = (y - y0 as f64) as f32;
        let (p00, p10, p01, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - ax) + p10[c] * ax;
            let bottom = p01[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bottom * ay;
        }
        out
    }

    /// Crops the `side × side` square at `(left, top)` and resizes it to `width × height`.
    pub fn crop_resize(&self, left: usize, top: usize, side: usize, width: usize, height: usize) -> Result<Self> {
        if side == 0 || left + side > self.width || top + side > self.height {
            return Err(Error::invalid(
                "crop",
                format!(
                    "square {side} at ({left},{top}) does not fit a {}x{} image",
                    self.width, self.height
                ),
            ));
        }
        if side == self.width && side == self.height && width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = side as f64 / width as f64;
        let sy = side as f64 / height as f64;
        Ok(Self::from_fn(width, height, |x, y| {
            self.sample(left as f64 + (x as f64 + 0.5) * sx, top as f64 + (y as f64 + 0.5) * sy)
        }))
    }

    /// Area-average downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::invalid(
                "factor",
                format!("{}x{} is not divisible by {factor}", self.width, self.height),
            ));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = (factor * factor) as f32;
        Ok(Self::from_fn(w, h, |x, y| {
            let mut acc = [0.0f32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.get(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            acc.map(|v| v / norm)
        }))
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self.data.iter().map(|&v| quantize_u8(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.to_rgb8()
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("in-memory png encoding");
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        Self::from_rgb8(img)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: PathBuf::from("<memory>"),
                message: e.to_string(),
            })?
            .to_rgb8();
        Self::from_rgb8(img)
    }

    fn from_rgb8(img: ImageBuffer<Rgb<u8>, Vec<u8>>) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::from_raw(w as usize, h as usize, data)
    }
}

pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel depth map in `[0, 1]`; background is exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png16(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma16();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        })
    }
}
