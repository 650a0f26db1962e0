//! 8-bit RGB rasters and the binary PPM (P6) codec.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {expected} samples, got {}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self { width, height, pixels }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resample to `width x height` using pixel-center alignment.
    pub fn resize(&self, width: u32, height: u32) -> RasterImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        RasterImage::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let (p00, p10, p01, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
            let mut out = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - ax) + p10[c] as f64 * ax;
                let bottom = p01[c] as f64 * (1.0 - ax) + p11[c] as f64 * ax;
                out[c] = (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8;
            }
            out
        })
    }
}

/// Encodes as binary PPM with maxval 255.
pub fn encode_ppm(image: &RasterImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&image.pixels);
    out
}

/// Decodes binary PPM (P6). Comments in the header are skipped; only
/// maxval 255 is accepted.
pub fn decode_ppm(data: &[u8]) -> Result<RasterImage> {
    let mut pos = 0usize;
    let mut next_token = || -> Result<&[u8]> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() && data[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Codec("truncated PPM header".into()));
        }
        Ok(&data[start..pos])
    };
    let magic = next_token()?;
    if magic != b"P6" {
        return Err(Error::Codec(format!(
            "expected P6 magic, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut number = |what: &str| -> Result<u32> {
        let tok = next_token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| Error::Codec(format!("bad {what} in PPM header")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::Codec(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Codec("zero-sized PPM".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::Codec("missing raster separator".into()));
    }
    pos += 1;
    let len = width as usize * height as usize * 3;
    let raster = data
        .get(pos..pos + len)
        .ok_or_else(|| Error::Codec(format!("raster truncated: need {len} bytes")))?;
    RasterImage::new(width, height, raster.to_vec())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&data)
}

pub fn write_ppm(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}
